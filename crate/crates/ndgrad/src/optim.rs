use crate::error::{GradError, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl AdamW {
    /// One decoupled-weight-decay Adam update. Parameters without a gradient
    /// or marked non-trainable are left untouched.
    pub fn step(&self, params: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(GradError::StateMismatch {
                name: format!("{} moments for {} parameters", state.m.len(), params.len()),
            });
        }
        for id in params.ids() {
            let shape = params.get(id).shape();
            if state.m[id.index()].shape() != shape || state.v[id.index()].shape() != shape {
                return Err(GradError::StateMismatch {
                    name: params.name(id).to_string(),
                });
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let lr = self.lr as f64;
        for id in params.ids() {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = state.m[i].data_mut();
            for (mv, &gv) in m.iter_mut().zip(g.data()) {
                *mv = (b1 * *mv as f64 + (1.0 - b1) * gv as f64) as f32;
            }
            let v = state.v[i].data_mut();
            for (vv, &gv) in v.iter_mut().zip(g.data()) {
                *vv = (b2 * *vv as f64 + (1.0 - b2) * (gv as f64).powi(2)) as f32;
            }
            let (m, v) = (state.m[i].data(), state.v[i].data());
            let w = params.value_mut(id).data_mut();
            for ((wv, &mv), &vv) in w.iter_mut().zip(m).zip(v) {
                let mhat = mv as f64 / bc1;
                let vhat = vv as f64 / bc2;
                let decayed = *wv as f64 * (1.0 - lr * self.weight_decay as f64);
                *wv = (decayed - lr * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::new(&[2], vec![1.0, -3.0]).unwrap()).unwrap();
        let mut state = AdamState::new(&store);
        let mut grads = Gradients::default();
        grads.put(id, Tensor::zeros(&[2]));
        AdamW::default().step(&mut store, &grads, &mut state).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn descends_on_square() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::ones(&[1])).unwrap();
        let mut state = AdamState::new(&store);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        drop(tape);
        let opt = AdamW { lr: 0.1, ..AdamW::default() };
        opt.step(&mut store, &grads, &mut state).unwrap();
        assert!(store.get(id).item() < 1.0);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(w) = (w0 - 3)^2 + 2 (w1 + 1)^2, minimum at (3, -1)
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut state = AdamState::new(&store);
        let opt = AdamW { lr: 0.05, ..AdamW::default() };
        let target = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let weight = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        for _ in 0..200 {
            let mut tape = Tape::new();
            let w = tape.param(&store, id);
            let c = tape.constant(target.clone());
            let k = tape.constant(weight.clone());
            let d = tape.sub(w, c).unwrap();
            let d2 = tape.mul(d, d).unwrap();
            let wd = tape.mul(d2, k).unwrap();
            let loss = tape.sum(wd).unwrap();
            let grads = tape.backward(loss).unwrap();
            drop(tape);
            opt.step(&mut store, &grads, &mut state).unwrap();
        }
        let w = store.get(id).data();
        let dist = ((w[0] - 3.0).powi(2) + (w[1] + 1.0).powi(2)).sqrt();
        assert!(dist < 1e-2, "distance {dist}");
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2])).unwrap();
        let mut state = AdamState::default();
        let err = AdamW::default().step(&mut store, &Gradients::default(), &mut state);
        assert!(matches!(err, Err(GradError::StateMismatch { .. })));
    }
}
