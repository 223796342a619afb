use super::{Float, Param};

/// Anything owning parameters. Visiting order is fixed and defines the
/// flat layout used by optimizers, checkpoints and gradient checks.
pub trait Module<T: Float> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }

    fn flat_values(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| v.extend_from_slice(p.value.data()));
        v
    }

    fn flat_grads(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        self.visit(&mut |p| v.extend_from_slice(p.grad.data()));
        v
    }

    fn set_flat_values(&mut self, values: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |p| {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        });
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    /// Adds `grads` (flat layout) to the accumulated gradients.
    fn add_flat_grads(&mut self, grads: &[T]) {
        let mut off = 0;
        self.visit_mut(&mut |p| {
            for g in p.grad.data_mut() {
                *g += grads[off];
                off += 1;
            }
        });
        assert_eq!(off, grads.len(), "flat gradient length mismatch");
    }

    fn grad_norm(&self) -> T {
        let mut s = T::zero();
        self.visit(&mut |p| s += p.grad.data().iter().map(|&g| g * g).sum::<T>());
        s.sqrt()
    }

    fn scale_grads(&mut self, k: T) {
        self.visit_mut(&mut |p| p.grad.data_mut().iter_mut().for_each(|g| *g *= k));
    }
}
