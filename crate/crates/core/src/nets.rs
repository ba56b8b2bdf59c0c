//! Single-hidden-layer MLPs and the Adam optimizer that trains them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_HIDDEN: usize = 210;

/// `y = W2·relu(W1·x + b1) + b2`, weights stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// `hidden_dim × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output_dim × hidden_dim`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
pub fn mlp_init(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Result<MlpParams> {
    if input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
        return Err(Error::Config(format!(
            "MLP dimensions must be positive, got {input_dim}/{hidden_dim}/{output_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
        let r = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| rng.gen_range(-r..r)).collect()
    };
    let w1 = uniform(hidden_dim * input_dim, input_dim);
    let w2 = uniform(output_dim * hidden_dim, hidden_dim);
    Ok(MlpParams {
        input_dim,
        hidden_dim,
        output_dim,
        w1,
        b1: vec![0.0; hidden_dim],
        w2,
        b2: vec![0.0; output_dim],
    })
}

impl MlpParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        MlpParams {
            input_dim,
            hidden_dim,
            output_dim,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; output_dim * hidden_dim],
            b2: vec![0.0; output_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// `w1, b1, w2, b2` concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    fn check_shape(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden_dim * self.input_dim
            && self.b1.len() == self.hidden_dim
            && self.w2.len() == self.output_dim * self.hidden_dim
            && self.b2.len() == self.output_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("MLP arrays do not match declared dimensions".into()))
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_shape()?;
        if input.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim,
                input.len()
            )));
        }
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.b1[h];
                z.max(0.0)
            })
            .collect();
        Ok((0..self.output_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
                row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + self.b2[o]
            })
            .collect())
    }

    /// Records every parameter as a leaf.
    pub fn record(&self, tape: &mut Tape) -> MlpVars {
        let mut leaves = |v: &[f64]| v.iter().map(|&x| tape.var(x)).collect::<Vec<_>>();
        MlpVars {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            w1: leaves(&self.w1),
            b1: leaves(&self.b1),
            w2: leaves(&self.w2),
            b2: leaves(&self.b2),
        }
    }
}

/// Parameters of an [`MlpParams`] living on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub w1: Vec<Var>,
    pub b1: Vec<Var>,
    pub w2: Vec<Var>,
    pub b2: Vec<Var>,
}

impl MlpVars {
    /// Same order as [`MlpParams::flatten`].
    pub fn all(&self) -> Vec<Var> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

/// Forward pass on the tape.
pub fn mlp_forward(tape: &mut Tape, net: &MlpVars, input: &[Var]) -> Result<Vec<Var>> {
    mlp_forward_first(tape, net, input, net.output_dim)
}

/// Forward pass computing only the first `outputs` outputs.
pub fn mlp_forward_first(tape: &mut Tape, net: &MlpVars, input: &[Var], outputs: usize) -> Result<Vec<Var>> {
    if input.len() != net.input_dim {
        return Err(Error::Dimension(format!(
            "MLP expects {} inputs, got {}",
            net.input_dim,
            input.len()
        )));
    }
    if outputs > net.output_dim {
        return Err(Error::Dimension(format!(
            "MLP has {} outputs, {outputs} requested",
            net.output_dim
        )));
    }
    let mut hidden = Vec::with_capacity(net.hidden_dim);
    for h in 0..net.hidden_dim {
        let row = &net.w1[h * net.input_dim..(h + 1) * net.input_dim];
        let z = tape.dot(row, input);
        let z = tape.add(z, net.b1[h]);
        let z = tape.relu(z);
        // Inactive units contribute nothing; skipping them keeps the tape short.
        if tape.value(z) > 0.0 {
            hidden.push((h, z));
        }
    }
    let mut out = Vec::with_capacity(outputs);
    for o in 0..outputs {
        let mut acc = net.b2[o];
        for &(h, z) in &hidden {
            let p = tape.mul(net.w2[o * net.hidden_dim + h], z);
            acc = tape.add(acc, p);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(params: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    /// Applies one update in place. Returns `Ok(false)` and leaves everything
    /// untouched when a gradient is not finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "Adam state holds {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = if c1 > 0.0 { self.m[i] / c1 } else { self.m[i] };
            let v_hat = if c2 > 0.0 { self.v[i] / c2 } else { self.v[i] };
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(true)
    }
}

/// Convenience wrapper: Adam step on an [`MlpParams`].
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &[f64]) -> Result<bool> {
    let mut flat = params.flatten();
    let applied = state.step(&mut flat, grads)?;
    if applied {
        params.set_flat(&flat)?;
    }
    Ok(applied)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub bvn: [usize; 3],
    pub ppn: [usize; 3],
}

/// JSON document holding both update networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDocument {
    pub bvn: MlpParams,
    pub ppn: MlpParams,
    pub dims: NetworkDims,
    pub seed: u64,
}

impl NetworkDocument {
    pub fn new(bvn: MlpParams, ppn: MlpParams, seed: u64) -> Self {
        let dims = NetworkDims {
            bvn: [bvn.input_dim, bvn.hidden_dim, bvn.output_dim],
            ppn: [ppn.input_dim, ppn.hidden_dim, ppn.output_dim],
        };
        NetworkDocument { bvn, ppn, dims, seed }
    }
}
