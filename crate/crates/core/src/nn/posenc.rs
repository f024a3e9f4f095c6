use super::params::Session;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sinusoidal encoding of one position: `sin(p / 10000^(2i/d))` at even
/// dimension `2i`, the matching cosine at `2i+1`.
pub fn sinusoid(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Encodings of positions `start..start+n`, one per row.
pub fn table(start: usize, n: usize, d: usize) -> Tensor {
    let data = (start..start + n).flat_map(|p| sinusoid(p, d)).collect();
    Tensor::from_parts(vec![n, d], data)
}

/// Adds the encoding of position `start + n` to row `n` of `x`.
pub fn add_pos_enc<'s>(_s: &'s Session<'_>, x: Var<'s>, start: usize) -> Result<Var<'s>> {
    let d = x.cols();
    if !d.is_multiple_of(2) {
        return Err(Error::invalid("positional encoding needs an even width"));
    }
    x.add_const(&table(start, x.rows(), d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use crate::tensor::Precision;

    #[test]
    fn position_zero_is_sin0_cos0() {
        assert_eq!(sinusoid(0, 6), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn position_one_dimension_zero() {
        let v = sinusoid(1, 4);
        assert!((v[0] - 1f64.sin()).abs() < 1e-15);
        assert!((v[0] - 0.84147).abs() < 5e-6);
        // dimension 2 uses wavelength 10000^(2/4) = 100.
        assert!((v[2] - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    }

    #[test]
    fn adding_to_zeros_gives_table_row() {
        let store = ParamStore::new();
        let s = Session::eval(&store, Precision::Verification);
        let y = add_pos_enc(&s, s.constant(Tensor::zeros(&[1, 8])), 5).unwrap().value();
        assert_eq!(y.data(), sinusoid(5, 8).as_slice());
        assert_eq!(table(3, 2, 8).row(1), sinusoid(4, 8).as_slice());
    }
}
