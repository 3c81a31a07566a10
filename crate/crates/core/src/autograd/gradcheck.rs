//! Central finite-difference oracle for tape gradients, in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)` for a
/// scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    GradCheck::new(eps).run(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x))
}

/// Multi-input finite-difference check. With `max_coords_per_input` set, a
/// seeded random subset of coordinates is probed per input, which keeps
/// checks over whole networks affordable.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        GradCheck {
            eps,
            max_coords_per_input: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, per_input: usize, seed: u64) -> Self {
        self.max_coords_per_input = Some(per_input);
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<f64>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        if self.eps <= 0.0 {
            return Err(Error::usage("finite_diff_check: eps must be positive"));
        }
        let eval = |values: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
            let out = f(&mut tape, &vars)?;
            Ok(tape.value(out).item())
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut probe = inputs.to_vec();
        let mut worst = 0.0f64;
        for (i, x) in inputs.iter().enumerate() {
            let coords: Vec<usize> = match self.max_coords_per_input {
                Some(k) if k < x.numel() => sample(&mut rng, x.numel(), k).into_vec(),
                _ => (0..x.numel()).collect(),
            };
            for j in coords {
                let base = x.data()[j];
                probe[i].data_mut()[j] = base + self.eps;
                let up = eval(&probe)?;
                probe[i].data_mut()[j] = base - self.eps;
                let down = eval(&probe)?;
                probe[i].data_mut()[j] = base;
                let numeric = (up - down) / (2.0 * self.eps);
                let a = analytic[i].data()[j];
                worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            }
        }
        Ok(worst)
    }
}
