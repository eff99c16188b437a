use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

/// Uniform weights over `exits`.
pub fn uniform_weights(exits: usize) -> Vec<f64> {
    vec![1.0 / exits as f64; exits]
}

/// Weighted sum of per-exit cross-entropies; `None` means uniform weights.
pub fn multi_exit_loss<T: Scalar>(
    tape: &mut Tape<T>,
    exit_logits: &[Var],
    targets: &[usize],
    weights: Option<&[f64]>,
) -> Result<Var> {
    if exit_logits.is_empty() {
        return Err(Error::Config("multi-exit loss needs at least one exit".into()));
    }
    let uniform;
    let weights = match weights {
        Some(w) => w,
        None => {
            uniform = uniform_weights(exit_logits.len());
            &uniform
        }
    };
    if weights.len() != exit_logits.len() {
        return Err(Error::Config(format!("{} exit weights for {} exits", weights.len(), exit_logits.len())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("exit weights {weights:?} must be non-negative and sum to 1")));
    }
    let mut loss: Option<Var> = None;
    for (&logits, &w) in exit_logits.iter().zip(weights) {
        let ce = tape.cross_entropy(logits, targets)?;
        let term = if exit_logits.len() == 1 { ce } else { tape.scale(ce, T::from_f64(w)) };
        loss = Some(match loss {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(loss.expect("at least one exit"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn ce_oracle(logits: &[f64], cols: usize, targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (row, &t) in logits.chunks(cols).zip(targets) {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        total / targets.len() as f64
    }

    #[test]
    fn single_exit_is_plain_cross_entropy() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_rows(&[&[0.1, 0.7, -0.2], &[1.0, 0.0, 0.5]]).unwrap());
        let a = multi_exit_loss(&mut tape, &[l], &[1, 2], None).unwrap();
        let b = tape.cross_entropy(l, &[1, 2]).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn identical_exits_equal_single_exit() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_rows(&[&[0.3, -0.1], &[0.2, 0.9]]).unwrap());
        let one = multi_exit_loss(&mut tape, &[l], &[0, 1], None).unwrap();
        let four = multi_exit_loss(&mut tape, &[l, l, l, l], &[0, 1], None).unwrap();
        assert!((tape.value(one).item() - tape.value(four).item()).abs() < 1e-15);
    }

    #[test]
    fn two_exits_match_weighted_oracle() {
        let a = [2.0, -1.0, 0.5, 0.0, 0.3, 0.3];
        let b = [-0.4, 1.2, 0.1, 0.9, -2.0, 0.7];
        let targets = [2, 0];
        let mut tape = Tape::<f64>::new();
        let la = tape.leaf(Tensor::new(vec![2, 3], a.to_vec()).unwrap());
        let lb = tape.leaf(Tensor::new(vec![2, 3], b.to_vec()).unwrap());
        let loss = multi_exit_loss(&mut tape, &[la, lb], &targets, Some(&[0.25, 0.75])).unwrap();
        let expected = 0.25 * ce_oracle(&a, 3, &targets) + 0.75 * ce_oracle(&b, 3, &targets);
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn mismatched_weights_are_config_errors() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::from_rows(&[&[0.0, 1.0]]).unwrap());
        assert!(matches!(multi_exit_loss(&mut tape, &[l, l], &[0], Some(&[1.0])), Err(Error::Config(_))));
        assert!(matches!(multi_exit_loss(&mut tape, &[l, l], &[0], Some(&[0.7, 0.7])), Err(Error::Config(_))));
        assert!(matches!(multi_exit_loss(&mut tape, &[], &[0], None), Err(Error::Config(_))));
    }
}
