use super::SlotLayout;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

/// Applies `f` to every slot of `y: [.., L·V]` with shared parameters and
/// concatenates the results in slot order. `f` receives `[.., L, V]` and
/// must act on the last axis only.
pub fn slotwise_apply<T, F>(t: &mut Tape<T>, y: Var, layout: SlotLayout, f: F) -> Result<Var>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, Var) -> Result<Var>,
{
    let shape = t.shape(y).to_vec();
    let m = *shape.last().ok_or_else(|| Error::contract("slotwise_apply on a scalar"))?;
    if m != layout.dim() {
        return Err(Error::contract(format!(
            "slotwise_apply: dimension {m} does not match layout {}x{}",
            layout.slots, layout.slot_dim
        )));
    }
    let lead = &shape[..shape.len() - 1];
    let mut split = lead.to_vec();
    split.extend([layout.slots, layout.slot_dim]);
    let ys = t.reshape(y, &split)?;
    let out = f(t, ys)?;
    let os = t.shape(out).to_vec();
    if os.len() != split.len() || os[..os.len() - 1] != split[..split.len() - 1] {
        return Err(Error::contract("slotwise_apply: map must preserve all but the last axis"));
    }
    let mut flat = lead.to_vec();
    flat.push(layout.slots * os[os.len() - 1]);
    t.reshape(out, &flat)
}

/// Value-level variant: `f` maps one slot slice to its output.
pub fn slotwise_values<T: Scalar>(y: &[T], layout: SlotLayout, f: impl Fn(&[T]) -> Vec<T>) -> Result<Vec<T>> {
    if y.len() != layout.dim() {
        return Err(Error::contract(format!(
            "slotwise: dimension {} does not match layout {}x{}",
            y.len(),
            layout.slots,
            layout.slot_dim
        )));
    }
    Ok(y.chunks(layout.slot_dim).flat_map(f).collect())
}
