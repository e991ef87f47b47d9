use crate::autograd::Var;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DICE_SMOOTH: f64 = 1e-5;

/// `[N, C, H, W]` one-hot encoding of a batch of label maps.
pub fn one_hot(labels: &[&LabelMap], num_classes: usize) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::invalid("one_hot: empty batch"))?;
    let (h, w) = (first.height, first.width);
    let s = h * w;
    let mut out = vec![0.0; labels.len() * num_classes * s];
    for (n, l) in labels.iter().enumerate() {
        if (l.height, l.width) != (h, w) {
            return Err(Error::shape("one_hot", format!("label maps {h}x{w} and {}x{}", l.height, l.width)));
        }
        for (v, &c) in l.data.iter().enumerate() {
            if c as usize >= num_classes {
                return Err(Error::invalid(format!("label {c} out of range for {num_classes} classes")));
            }
            out[(n * num_classes + c as usize) * s + v] = 1.0;
        }
    }
    Tensor::new(vec![labels.len(), num_classes, h, w], out)
}

/// Mean voxel cross-entropy and `1 − soft Dice` of the joint foreground
/// (all classes but 0), computed over the whole batch.
pub fn dice_ce_components<'t>(logits: Var<'t>, labels: &[&LabelMap]) -> Result<(Var<'t>, Var<'t>)> {
    let shape = logits.shape();
    if shape.len() != 4 || shape[0] != labels.len() {
        return Err(Error::shape("dice_ce_loss", format!("logits {shape:?} for {} label maps", labels.len())));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if labels.iter().any(|l| (l.height, l.width) != (h, w)) {
        return Err(Error::shape("dice_ce_loss", format!("labels do not match logits {shape:?}")));
    }
    let tape = logits.tape();
    let onehot = one_hot(labels, c)?;
    let s = h * w;
    let voxels = (n * s) as f64;

    let ce = logits.log_softmax_channel()?.mul(tape.constant(onehot.clone()))?.sum()?.scale(-1.0 / voxels)?;

    // Joint foreground: p_fg = Σ_{c≥1} p_c, g_fg = [label ≥ 1].
    let mut fg_pred = vec![0.0; onehot.len()];
    let mut fg_both = vec![0.0; onehot.len()];
    let mut g_count = 0.0;
    for b in 0..n {
        for v in 0..s {
            let g = labels[b].data[v] != 0;
            g_count += g as u8 as f64;
            for k in 1..c {
                let i = (b * c + k) * s + v;
                fg_pred[i] = 1.0;
                fg_both[i] = g as u8 as f64;
            }
        }
    }
    let p = logits.softmax_channel()?;
    let inter = p.mul(tape.constant(Tensor::new(shape.clone(), fg_both)?))?.sum()?;
    let psum = p.mul(tape.constant(Tensor::new(shape, fg_pred)?))?.sum()?;
    let num = inter.scale(2.0)?.add_const(DICE_SMOOTH)?;
    let den = psum.add_const(g_count + DICE_SMOOTH)?;
    let dice_loss = num.div(den)?.scale(-1.0)?.add_const(1.0)?;
    Ok((ce, dice_loss))
}

/// Cross-entropy plus `1 − soft foreground Dice`, equally weighted.
pub fn dice_ce_loss<'t>(logits: Var<'t>, labels: &[&LabelMap]) -> Result<Var<'t>> {
    let (ce, dice) = dice_ce_components(logits, labels)?;
    ce.add(dice)
}
