use crate::model::Model;
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>) {
        let (lr, mu, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for (p, v) in model.params_mut().into_iter().zip(&mut self.velocity) {
            for ((x, g), vel) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = mu * *vel + (*g + wd * *x);
                *x -= lr * *vel;
            }
        }
    }
}
