use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// A collection of named parameter blocks visited in a fixed order.
///
/// The visit order defines the layout of optimizer state, checkpoints and
/// gradient reports, so implementations must keep it stable.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor2));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor2));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Same structure, all entries zero.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(0.0));
        z
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }

    /// Overwrites every block from `(name, tensor)` pairs; names and shapes must match exactly.
    fn load_named(&mut self, tensors: &[(String, Tensor2)]) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        self.visit_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match tensors.get(idx) {
                Some((n, src)) if n == name && src.shape() == t.shape() => {
                    t.as_mut_slice().copy_from_slice(src.as_slice());
                }
                Some((n, src)) => {
                    err = Some(Error::Checkpoint(format!(
                        "block {idx}: expected `{name}` {:?}, found `{n}` {:?}",
                        t.shape(),
                        src.shape()
                    )));
                }
                None => err = Some(Error::Checkpoint(format!("missing block `{name}`"))),
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, model has {idx}",
                tensors.len()
            )));
        }
        Ok(())
    }

    fn to_named(&self) -> Vec<(String, Tensor2)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

/// Applies `f` to entry `entry` of the `block`-th visited tensor.
pub(crate) fn with_entry_mut<P: Parameters + ?Sized>(
    params: &mut P,
    block: usize,
    entry: usize,
    f: impl FnOnce(&mut f64),
) {
    let mut idx = 0;
    let mut f = Some(f);
    params.visit_mut(&mut |_, t| {
        if idx == block {
            if let Some(f) = f.take() {
                f(&mut t.as_mut_slice()[entry]);
            }
        }
        idx += 1;
    });
}
