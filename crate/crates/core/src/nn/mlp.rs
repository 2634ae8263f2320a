//! Fully connected network with rectifier hidden activations and a linear
//! output layer.

use rand::Rng;

use super::{linear_init, Element, Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Mlp<T: Element> {
    pub sizes: Vec<usize>,
    weights: Vec<Parameter<T>>,
    biases: Vec<Parameter<T>>,
}

impl<T: Element> Mlp<T> {
    /// `sizes` lists layer widths input-first, e.g. [1200, 256, 64, 1].
    pub fn new<R: Rng>(prefix: &str, sizes: &[usize], rng: &mut R) -> Mlp<T> {
        assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "mlp sizes must be positive");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            weights.push(Parameter::new(
                format!("{prefix}.{i}.w"),
                linear_init(rng, d_out, d_in),
            ));
            biases.push(Parameter::new(format!("{prefix}.{i}.b"), Tensor::zeros(&[d_out])));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    /// Applies the network to a vector input.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Var {
        let last = self.weights.len() - 1;
        let mut x = input;
        for i in 0..self.weights.len() {
            let w = tape.param(&self.weights[i]);
            let b = tape.param(&self.biases[i]);
            x = tape.linear(x, w, b);
            if i != last {
                x = tape.relu(x);
            }
        }
        x
    }

    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_flow_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mlp: Mlp<f64> = Mlp::new("m", &[4, 3, 1], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -1.0, 0.5, 2.0]));
        let y = mlp.forward(&mut tape, x);
        assert_eq!(tape.value(y).shape(), &[1]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp: Mlp<f64> = Mlp::new("m", &[2, 2, 1], &mut rng);
        for p in mlp.parameters_mut() {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0, -2.0]));
        let y = mlp.forward(&mut tape, x);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }
}
