//! Bidirectional LSTM layer over a sequence of row vectors.

use rand::Rng;

use super::{linear_init, Element, Parameter, Tape, Tensor, Var};
use crate::{Error, Result};

/// One direction's weights. Gate rows are ordered [i | f | g | o].
#[derive(Debug, Clone)]
pub struct LstmDirection<T: Element> {
    pub w_x: Parameter<T>,
    pub w_h: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Element> LstmDirection<T> {
    fn new<R: Rng>(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w_x = Parameter::new(format!("{prefix}.w_x"), linear_init(rng, 4 * hidden_dim, input_dim));
        let w_h = Parameter::new(format!("{prefix}.w_h"), linear_init(rng, 4 * hidden_dim, hidden_dim));
        // Forget-gate bias starts at +1, the standard trick against early
        // gradient vanishing; other gates start at 0.
        let mut bias_t = Tensor::zeros(&[4 * hidden_dim]);
        for j in hidden_dim..2 * hidden_dim {
            bias_t.data_mut()[j] = T::one();
        }
        let bias = Parameter::new(format!("{prefix}.bias"), bias_t);
        LstmDirection { w_x, w_h, bias }
    }
}

/// Per-position outputs and the concatenated final hidden state.
#[derive(Debug, Clone, Copy)]
pub struct BiLstmOutput {
    /// [n x 2H]: row i = [forward state at i | backward state at i].
    pub outputs: Var,
    /// [2H]: [last forward state | last backward state].
    pub final_hidden: Var,
}

#[derive(Debug, Clone)]
pub struct BiLstmLayer<T: Element> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub fwd: LstmDirection<T>,
    pub bwd: LstmDirection<T>,
}

impl<T: Element> BiLstmLayer<T> {
    pub fn new<R: Rng>(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        assert!(input_dim > 0 && hidden_dim > 0, "bilstm dims must be positive");
        let fwd = LstmDirection::new(&format!("{prefix}.fwd"), input_dim, hidden_dim, rng);
        let bwd = LstmDirection::new(&format!("{prefix}.bwd"), input_dim, hidden_dim, rng);
        BiLstmLayer { input_dim, hidden_dim, fwd, bwd }
    }

    /// Runs both directions over `input` ([n x input_dim]).
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<BiLstmOutput> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Model(format!(
                "bilstm input shape {shape:?} incompatible with input_dim {}",
                self.input_dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::Model("bilstm over empty sequence".into()));
        }
        let n = shape[0];

        let fwx = tape.param(&self.fwd.w_x);
        let fwh = tape.param(&self.fwd.w_h);
        let fb = tape.param(&self.fwd.bias);
        let f_states = tape.lstm_seq(input, fwx, fwh, fb);

        let reversed = tape.reverse_rows(input);
        let bwx = tape.param(&self.bwd.w_x);
        let bwh = tape.param(&self.bwd.w_h);
        let bb = tape.param(&self.bwd.bias);
        let b_states = tape.lstm_seq(reversed, bwx, bwh, bb);

        let outputs = tape.join_bidir(f_states, b_states);
        let f_last = tape.row_at(f_states, n - 1);
        let b_last = tape.row_at(b_states, n - 1);
        let final_hidden = tape.concat_vecs(&[f_last, b_last]);
        Ok(BiLstmOutput { outputs, final_hidden })
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![
            &self.fwd.w_x,
            &self.fwd.w_h,
            &self.fwd.bias,
            &self.bwd.w_x,
            &self.bwd.w_h,
            &self.bwd.bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![
            &mut self.fwd.w_x,
            &mut self.fwd.w_h,
            &mut self.fwd.bias,
            &mut self.bwd.w_x,
            &mut self.bwd.w_h,
            &mut self.bwd.bias,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_widths_match_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer: BiLstmLayer<f64> = BiLstmLayer::new("l", 3, 5, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[4, 3], vec![0.1; 12]));
        let out = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(out.outputs).shape(), &[4, 10]);
        assert_eq!(tape.value(out.final_hidden).shape(), &[10]);
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer: BiLstmLayer<f64> = BiLstmLayer::new("l", 2, 3, &mut rng);
        for p in layer.parameters_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3, 2], vec![0.7; 6]));
        let out = layer.forward(&mut tape, x).unwrap();
        assert!(tape.value(out.outputs).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.final_hidden).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn length_one_sequence_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer: BiLstmLayer<f64> = BiLstmLayer::new("l", 2, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.5, -0.5]));
        let out = layer.forward(&mut tape, x).unwrap();
        let o = tape.value(out.outputs);
        let h = tape.value(out.final_hidden);
        // With a single step the per-position output equals the final hidden.
        assert_eq!(o.row(0), h.data());
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer: BiLstmLayer<f64> = BiLstmLayer::new("l", 2, 3, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[0, 2], vec![]));
        assert!(layer.forward(&mut tape, x).is_err());
    }

    #[test]
    fn forward_bias_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer: BiLstmLayer<f64> = BiLstmLayer::new("l", 2, 4, &mut rng);
        let b = layer.fwd.bias.value.data();
        assert!(b[0..4].iter().all(|&v| v == 0.0)); // input gate
        assert!(b[4..8].iter().all(|&v| v == 1.0)); // forget gate
        assert!(b[8..16].iter().all(|&v| v == 0.0)); // cell + output gates
    }
}
