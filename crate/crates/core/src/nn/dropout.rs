use rand::Rng;

use super::{LayerError, Mode};
use crate::tensor::Tensor;

/// Inverted dropout. Returns the output and, in train mode, the mask of
/// per-element multipliers (`0` or `1/(1 − rate)`).
pub fn dropout_forward<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Option<Tensor>), LayerError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(LayerError::InvalidRate(rate));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(input.dims(), mask)?;
    Ok((input.mul(&mask)?, Some(mask)))
}

pub fn dropout_backward(grad_out: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, LayerError> {
    match mask {
        Some(mask) => Ok(grad_out.mul(mask)?),
        None => Ok(grad_out.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let (y, m) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(m.is_none());
        for rate in [0.1, 0.5, 0.9] {
            let (y, m) = dropout_forward(&x, rate, Mode::Eval, &mut rng).unwrap();
            assert_eq!(y, x);
            assert!(m.is_none());
        }
    }

    #[test]
    fn invalid_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::zeros(&[2]).unwrap();
        assert_eq!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).unwrap_err(), LayerError::InvalidRate(1.0));
        assert!(dropout_forward(&x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn mean_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::full(&[100_000], 1.0).unwrap();
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let mask = mask.unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0 || m == 2.0));
        let g = dropout_backward(&x, Some(&mask)).unwrap();
        assert_eq!(g, mask);
    }
}
