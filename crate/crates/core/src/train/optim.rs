use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::archive::Archive;
use crate::tensor::{Scalar, Tensor};

/// Decay points in tenths of the iteration budget.
pub const DECAY_TENTHS: [usize; 3] = [3, 6, 9];
pub const DECAY_FACTOR: f64 = 0.1;

/// Step-decayed learning rate: `base` times 0.1 for every decay point
/// (30%, 60%, 90% of `total`) that iteration `it` has reached.
pub fn learning_rate(base: f64, it: usize, total: usize) -> f64 {
    let passed = DECAY_TENTHS.iter().filter(|&&p| it >= total * p / 10).count();
    base * DECAY_FACTOR.powi(passed as i32)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; parameters with a `None` gradient and their
    /// moments are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let step = T::lit(lr / c1);
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in store.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, store: &ParamStore<T>, prefix: &str, archive: &mut Archive) -> Result<()> {
        for ((name, t), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            archive.push(format!("{prefix}.m.{name}"), &Tensor::new(t.shape().to_vec(), m.clone())?);
            archive.push(format!("{prefix}.v.{name}"), &Tensor::new(t.shape().to_vec(), v.clone())?);
        }
        Ok(())
    }

    pub fn read_from(&mut self, store: &ParamStore<T>, prefix: &str, archive: &Archive, step: u64) -> Result<()> {
        for (i, (name, t)) in store.iter().enumerate() {
            for (kind, dst) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}.{kind}.{name}");
                let src = archive
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::dim(format!("optimizer state {key} has shape {:?}", src.shape())));
                }
                *dst = src.cast::<T>().into_data();
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_decay_points() {
        let lr = |it| learning_rate(1e-3, it, 100);
        assert_eq!(lr(0), 1e-3);
        assert_eq!(lr(29), 1e-3);
        assert!((lr(30) - 1e-4).abs() < 1e-18);
        assert!((lr(59) - 1e-4).abs() < 1e-18);
        assert!((lr(60) - 1e-5).abs() < 1e-18);
        assert!((lr(90) - 1e-6).abs() < 1e-18);
        assert!((lr(99) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap()).unwrap();
        let mut opt = Adam::new(&s);
        opt.update(&mut s, &[Some(vec![0.5, -2.0])], 0.1).unwrap();
        let w = s.by_name("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
