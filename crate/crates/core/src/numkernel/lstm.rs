//! LSTM cell with fused gate weights, gate order input, forget, candidate, output.

use super::tape::{Bound, Tape, Var};
use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Tape handles for one LSTM cell.
///
/// `w_ih` is `[4H × D]`, `w_hh` is `[4H × H]` and `bias` is `[4H]`, each
/// stacked as input, forget, candidate, output gates.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub const W_IH: &'static str = "w_ih";
    pub const W_HH: &'static str = "w_hh";
    pub const BIAS: &'static str = "bias";

    pub fn from_bound(tape: &Tape<'_>, bound: &Bound, prefix: &str) -> Result<Self> {
        let w_ih = bound.get(&format!("{prefix}{}", Self::W_IH))?;
        let w_hh = bound.get(&format!("{prefix}{}", Self::W_HH))?;
        let bias = bound.get(&format!("{prefix}{}", Self::BIAS))?;
        let (si, sh, sb) = (tape.value(w_ih).shape(), tape.value(w_hh).shape(), tape.value(bias).shape());
        if si.len() != 2 || sh.len() != 2 || sb.len() != 1 || si[0] % 4 != 0 {
            return Err(Error::dim(format!("lstm: inconsistent shapes w_ih {si:?}, w_hh {sh:?}, bias {sb:?}")));
        }
        let hidden = si[0] / 4;
        if sh != [4 * hidden, hidden] || sb != [4 * hidden] {
            return Err(Error::dim(format!("lstm: inconsistent shapes w_ih {si:?}, w_hh {sh:?}, bias {sb:?}")));
        }
        Ok(LstmParams { w_ih, w_hh, bias, input: si[1], hidden })
    }

    /// One recurrence step, returning `(h', c')`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        if tape.value(h).shape() != [hd] || tape.value(c).shape() != [hd] {
            return Err(Error::dim(format!(
                "lstm: state shapes {:?}/{:?} do not match hidden size {hd}",
                tape.value(h).shape(),
                tape.value(c).shape()
            )));
        }
        let zx = tape.matvec(self.w_ih, x)?;
        let zh = tape.matvec(self.w_hh, h)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add(z, self.bias)?;
        let zi = tape.slice(z, 0, hd)?;
        let zf = tape.slice(z, hd, hd)?;
        let zg = tape.slice(z, 2 * hd, hd)?;
        let zo = tape.slice(z, 3 * hd, hd)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

/// Value-level LSTM step. `params` must hold `w_ih`, `w_hh` and `bias`.
pub fn lstm_step(x: &Tensor, h: &Tensor, c: &Tensor, params: &ParamStore) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let lstm = LstmParams::from_bound(&tape, &bound, "")?;
    let (x, h, c) = (tape.constant_ref(x), tape.constant_ref(h), tape.constant_ref(c));
    let (h2, c2) = lstm.step(&mut tape, x, h, c)?;
    Ok((tape.value(h2).clone(), tape.value(c2).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_params(d: usize, hd: usize) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w_ih", Tensor::zeros(&[4 * hd, d]));
        p.insert("w_hh", Tensor::zeros(&[4 * hd, hd]));
        p.insert("bias", Tensor::zeros(&[4 * hd]));
        p
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_params_zero_state() {
        let p = zero_params(3, 2);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let (h, c) = lstm_step(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &p).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_params_halves_cell() {
        let p = zero_params(3, 2);
        let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let c0 = Tensor::vector(vec![0.8, -3.0]);
        let (_, c) = lstm_step(&x, &Tensor::zeros(&[2]), &c0, &p).unwrap();
        assert_eq!(c.data(), &[0.4, -1.5]);
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let mut p = zero_params(3, 2);
        p.insert("bias", Tensor::zeros(&[7]));
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let r = lstm_step(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), &p);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn gradient_of_squared_hidden_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let d = rng.random_range(1..=6);
            let hd = rng.random_range(1..=5);
            let mut p = ParamStore::new();
            p.insert("w_ih", rand_t(&mut rng, &[4 * hd, d]));
            p.insert("w_hh", rand_t(&mut rng, &[4 * hd, hd]));
            p.insert("bias", rand_t(&mut rng, &[4 * hd]));
            let x = rand_t(&mut rng, &[d]);
            let h0 = rand_t(&mut rng, &[hd]);
            let c0 = rand_t(&mut rng, &[hd]);
            let err = grad_check(
                |tape, b| {
                    let lstm = LstmParams::from_bound(tape, b, "")?;
                    let (x, h, c) = (tape.constant_ref(&x), tape.constant_ref(&h0), tape.constant_ref(&c0));
                    let (h2, _) = lstm.step(tape, x, h, c)?;
                    tape.dot(h2, h2)
                },
                &p,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }
}
