//! Single-layer LSTM sentence encoder.
//!
//! Gate weights are stacked row-wise in the order input, forget, cell
//! candidate, output (`i, f, g, o`):
//!
//! * `lstm.embedding`  : `V × E`
//! * `lstm.w_input`    : `4·Hd × E`
//! * `lstm.w_recurrent`: `4·Hd × Hd`
//! * `lstm.bias`       : `4·Hd`

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ModelParams};
use crate::tensor::Tensor;

pub const EMBEDDING: &str = "lstm.embedding";
pub const W_INPUT: &str = "lstm.w_input";
pub const W_RECURRENT: &str = "lstm.w_recurrent";
pub const BIAS: &str = "lstm.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

/// Uniform `±1/√Hd` weights, forget-gate bias 1, other biases 0, `N(0,1)`-ish
/// uniform embeddings.
pub fn init_lstm<R: Rng + ?Sized>(params: &mut ModelParams, shape: LstmShape, rng: &mut R) {
    let LstmShape {
        vocab_size,
        embed_dim,
        hidden,
    } = shape;
    let bound = 1.0 / (hidden as f64).sqrt();
    params.insert(
        EMBEDDING,
        Tensor::uniform([vocab_size, embed_dim], 1.0, rng),
    );
    params.insert(
        W_INPUT,
        Tensor::uniform([4 * hidden, embed_dim], bound, rng),
    );
    params.insert(
        W_RECURRENT,
        Tensor::uniform([4 * hidden, hidden], bound, rng),
    );
    let mut bias = Tensor::zeros([4 * hidden]);
    bias.data_mut()[hidden..2 * hidden].fill(1.0);
    params.insert(BIAS, bias);
}

/// Final hidden state `h_n` of one token sequence, as a `1 × Hd` row.
pub fn encode_row(tape: &mut Tape, b: &Bindings, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract("lstm_encode of an empty sequence".into()));
    }
    let w_rec = b.get(W_RECURRENT)?;
    let hidden = tape.shape(w_rec)[1];
    if tape.shape(w_rec)[0] != 4 * hidden {
        return Err(Error::Dimension(format!(
            "recurrent weight {:?} is not 4·Hd × Hd",
            tape.shape(w_rec)
        )));
    }
    let emb = tape.embedding(b.get(EMBEDDING)?, ids)?;
    let projected = tape.affine(emb, b.get(W_INPUT)?, Some(b.get(BIAS)?))?;
    let mut state: Option<(Var, Var)> = None;
    for t in 0..ids.len() {
        let mut z = tape.slice(projected, 0, t, 1)?;
        if let Some((h, _)) = state {
            let rec = tape.affine(h, w_rec, None)?;
            z = tape.add(z, rec)?;
        }
        let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * hidden, hidden);
        let (zi, zf, zg, zo) = (
            gate(tape, 0)?,
            gate(tape, 1)?,
            gate(tape, 2)?,
            gate(tape, 3)?,
        );
        let i = tape.sigmoid(zi);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let ig = tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let f = tape.sigmoid(zf);
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        state = Some((h, c));
    }
    Ok(state.expect("non-empty sequence").0)
}

/// `r = h_n` as a rank-1 `Hd` tensor.
pub fn lstm_encode(tape: &mut Tape, b: &Bindings, ids: &[usize]) -> Result<Var> {
    let row = encode_row(tape, b, ids)?;
    let hidden = tape.shape(row)[1];
    tape.reshape(row, [hidden])
}

/// Stacks the encodings of a batch of sequences into `N × Hd`.
pub fn encode_batch(tape: &mut Tape, b: &Bindings, batch: &[Vec<usize>]) -> Result<Var> {
    let rows = batch
        .iter()
        .map(|ids| encode_row(tape, b, ids))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check_fn, CheckPlan};

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn params(shape: LstmShape, seed: u64) -> ModelParams {
        let mut p = ModelParams::new();
        init_lstm(&mut p, shape, &mut ChaCha8Rng::seed_from_u64(seed));
        p
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let shape = LstmShape {
            vocab_size: 5,
            embed_dim: 3,
            hidden: 4,
        };
        let mut p = params(shape, 0);
        for (_, prm) in p.iter_mut() {
            prm.value.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let r = lstm_encode(&mut tape, &b, &[2, 3, 4, 1]).unwrap();
        assert_eq!(tape.value(r), &Tensor::zeros([4]));
    }

    #[test]
    fn scalar_recurrence_matches_hand_evaluation() {
        let mut p = ModelParams::new();
        p.insert(EMBEDDING, Tensor::new([2, 1], vec![0.0, 0.7]).unwrap());
        p.insert(
            W_INPUT,
            Tensor::new([4, 1], vec![0.5, -0.3, 0.8, 1.1]).unwrap(),
        );
        p.insert(
            W_RECURRENT,
            Tensor::new([4, 1], vec![0.2, 0.4, -0.6, 0.9]).unwrap(),
        );
        p.insert(BIAS, Tensor::new([4], vec![0.1, 1.0, -0.2, 0.05]).unwrap());
        let (wi, wr, bias) = (
            [0.5, -0.3, 0.8, 1.1],
            [0.2, 0.4, -0.6, 0.9],
            [0.1, 1.0, -0.2, 0.05],
        );
        let x = 0.7;
        let (mut h, mut c) = (0.0f64, 0.0f64);
        for _ in 0..2 {
            let z: Vec<f64> = (0..4).map(|k| wi[k] * x + wr[k] * h + bias[k]).collect();
            c = sigmoid(z[1]) * c + sigmoid(z[0]) * z[2].tanh();
            h = sigmoid(z[3]) * c.tanh();
        }
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let r = lstm_encode(&mut tape, &b, &[1, 1]).unwrap();
        assert!((tape.value(r).item() - h).abs() < 1e-15);
    }

    #[test]
    fn large_hidden_size_is_accepted() {
        let p = params(
            LstmShape {
                vocab_size: 10,
                embed_dim: 300,
                hidden: 256,
            },
            1,
        );
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let r = lstm_encode(&mut tape, &b, &[3, 4, 5]).unwrap();
        assert_eq!(tape.shape(r), &[256]);
        assert!(tape.value(r).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn out_of_vocabulary_id() {
        let p = params(
            LstmShape {
                vocab_size: 4,
                embed_dim: 2,
                hidden: 2,
            },
            2,
        );
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        assert!(matches!(
            lstm_encode(&mut tape, &b, &[1, 9]),
            Err(Error::OutOfVocabulary { id: 9, .. })
        ));
        assert!(matches!(
            lstm_encode(&mut tape, &b, &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = params(
            LstmShape {
                vocab_size: 6,
                embed_dim: 3,
                hidden: 4,
            },
            3,
        );
        let plan = CheckPlan {
            coords_per_param: 8,
            seed: 5,
        };
        let report = check_fn(&p, 1e-5, &plan, |tape, b| {
            let r = encode_batch(tape, b, &[vec![2, 3, 5], vec![4, 1]])?;
            let sq = tape.mul(r, r)?;
            let s = tape.sum(sq);
            let l = tape.sum(r);
            tape.add(s, l)
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-3, "{:?}", report.worst());
    }
}
