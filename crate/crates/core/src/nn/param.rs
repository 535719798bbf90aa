use super::tensor::{Element, Tensor};

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names && self.shapes() == other.shapes()
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every parameter from a flat buffer produced by [`flatten`].
    ///
    /// [`flatten`]: ParamStore::flatten
    pub fn load_flat(&mut self, flat: &[T]) -> Result<(), String> {
        if flat.len() != self.num_scalars() {
            return Err(format!("expected {} scalars, got {}", self.num_scalars(), flat.len()));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Converts to another scalar type.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| {
                    Tensor::from_vec(
                        t.shape(),
                        t.data().iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Global L2 norm over a set of gradients.
pub fn global_norm<T: Element>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Element>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// `ema <- decay * ema + (1 - decay) * raw`, elementwise.
pub fn ema_update<T: Element>(raw: &ParamStore<T>, ema: &mut ParamStore<T>, decay: f64) {
    assert!(raw.same_layout(ema), "ema layout mismatch");
    let d = T::from_f64_lossy(decay);
    let one_minus = T::from_f64_lossy(1.0 - decay);
    for (e, r) in ema.iter_mut().zip(raw.iter()) {
        for (ev, &rv) in e.data_mut().iter_mut().zip(r.data()) {
            *ev = d * *ev + one_minus * rv;
        }
    }
}

/// Hyperparameters of the decoupled-weight-decay Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], hp: &AdamWParams) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64_lossy(hp.beta1), T::from_f64_lossy(hp.beta2));
        let (ob1, ob2) = (T::from_f64_lossy(1.0 - hp.beta1), T::from_f64_lossy(1.0 - hp.beta2));
        let decay = T::from_f64_lossy(1.0 - hp.learning_rate * hp.weight_decay);
        let step = T::from_f64_lossy(hp.learning_rate / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(hp.eps);
        for (id, g) in grads.iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            for (((pv, mv), vv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::from_vec([values.len(), 1, 1, 1], values.to_vec()));
        s
    }

    #[test]
    fn ema_trivial_decays() {
        let raw = store(&[1.0, 2.0]);
        let mut ema = store(&[0.0, 0.0]);
        ema_update(&raw, &mut ema, 0.0);
        assert_eq!(ema, raw);

        let mut ema = store(&[5.0, 6.0]);
        ema_update(&raw, &mut ema, 1.0);
        assert_eq!(ema.get(0).data(), &[5.0, 6.0]);

        let raw = store(&[1.0]);
        let mut ema = store(&[0.0]);
        ema_update(&raw, &mut ema, 0.9);
        assert!((ema.get(0).data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ema_converges_geometrically_to_frozen_raw() {
        let raw = store(&[1.0]);
        let mut ema = store(&[0.0]);
        for n in 1..=50 {
            ema_update(&raw, &mut ema, 0.8);
            let expected = 1.0 - 0.8f64.powi(n);
            assert!((ema.get(0).data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_to_unit_norm() {
        let mut grads = vec![
            Tensor::from_vec([2, 1, 1, 1], vec![6.0f64, 0.0]),
            Tensor::from_vec([1, 1, 1, 1], vec![8.0f64]),
        ];
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-6);

        let mut small = vec![Tensor::from_vec([1, 1, 1, 1], vec![0.5f64])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.5]);
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut params = store(&[1.0, -1.0]);
        let mut adam = AdamState::new(&params);
        let grads = vec![Tensor::from_vec([2, 1, 1, 1], vec![3.0, -0.2])];
        let hp = AdamWParams {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.0,
            eps: 0.0,
        };
        adam.step(&mut params, &grads, &hp);
        // bias-corrected first step is lr * sign(g)
        assert!((params.get(0).data()[0] - 0.9).abs() < 1e-12);
        assert!((params.get(0).data()[1] + 0.9).abs() < 1e-12);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut params = store(&[2.0]);
        let mut adam = AdamState::new(&params);
        let grads = vec![Tensor::from_vec([1, 1, 1, 1], vec![0.0])];
        let hp = AdamWParams {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.5,
            eps: 1e-8,
        };
        adam.step(&mut params, &grads, &hp);
        assert!((params.get(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.register("a", Tensor::from_vec([2, 1, 1, 1], vec![1.0, 2.0]));
        s.register("b", Tensor::from_vec([1, 3, 1, 1], vec![3.0, 4.0, 5.0]));
        let flat = s.flatten();
        let mut t = s.zeros_like();
        t.load_flat(&flat).unwrap();
        assert_eq!(s, t);
        assert!(t.load_flat(&flat[..4]).is_err());
    }
}
