use alloc::vec::Vec;

/// Named, flat views over every learnable array of a model. A zeroed clone
/// of the model serves as its gradient buffer.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Reads the `index`-th scalar in declaration order.
    fn get_flat(&self, mut index: usize) -> Option<f64> {
        for (_, t) in self.tensors() {
            if index < t.len() {
                return Some(t[index]);
            }
            index -= t.len();
        }
        None
    }

    fn set_flat(&mut self, mut index: usize, value: f64) -> bool {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return true;
            }
            index -= t.len();
        }
        false
    }
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd<P> {
    pub momentum: f64,
    velocity: P,
}

impl<P: Parameters> Sgd<P> {
    pub fn new(params: &P, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut P, grads: &P, lr: f64) {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        for (((_, v), (_, g)), (_, p)) in self.velocity.tensors_mut().into_iter().zip(grads).zip(params.iter_mut()) {
            for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}
