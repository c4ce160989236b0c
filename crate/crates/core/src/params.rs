//! Named parameter collections shared by every model.

use sha2::{Digest, Sha256};

use crate::tensor::{Tape, Tensor, Var};

pub trait Parameters {
    fn named(&self) -> Vec<(&'static str, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn zero_grads(&mut self) {
        for (_, t) in self.named_mut() {
            t.zero_grad();
        }
    }

    fn grads_all_zero(&self) -> bool {
        self.named()
            .iter()
            .all(|(_, t)| t.grad().iter().all(|&g| g == 0.0))
    }

    fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Hash of the exact bit patterns of every value, for freeze checks.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in t.values() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Copies every parameter onto `tape`, trainable or frozen, in
/// [`Parameters::named`] order.
pub fn register<P: Parameters + ?Sized>(p: &P, tape: &mut Tape, trainable: bool) -> Vec<Var> {
    p.named()
        .into_iter()
        .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
        .collect()
}

/// Adds the tape gradients of `vars` (from [`register`]) into the
/// parameters' accumulators.
pub fn accumulate<P: Parameters + ?Sized>(p: &mut P, tape: &Tape, vars: &[Var]) {
    for ((_, t), &v) in p.named_mut().into_iter().zip(vars) {
        if let Some(g) = tape.grad_slice(v) {
            t.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}
