//! Sparse autoencoder: sigmoid hidden layer, linear output, squared-error
//! reconstruction loss plus a KL-divergence sparsity penalty on the batch-mean
//! hidden activations. Trained with plain mini-batch SGD and early stopping on
//! validation reconstruction error.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FEATURE_COUNT;

/// Bounds for batch-mean activations inside the KL term.
pub const KL_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Target mean activation of each hidden unit (rho).
    pub target_sparsity: f64,
    /// Weight of the sparsity penalty in the total loss (beta).
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            input_size: FEATURE_COUNT,
            hidden_size: 32,
            target_sparsity: 0.1,
            sparsity_weight: 0.2,
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 500,
            patience: 20,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::param(m.to_string()));
        if self.input_size == 0 || self.hidden_size == 0 {
            return bad("layer sizes must be positive");
        }
        if !(self.target_sparsity > 0.0 && self.target_sparsity < 1.0) {
            return bad("target sparsity must lie in (0, 1)");
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return bad("sparsity weight must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and > 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be positive");
        }
        Ok(())
    }
}

/// Weights and biases. Matrices are row-major: `w1` is hidden x input,
/// `w2` is input x hidden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of the total loss, laid out like [`Autoencoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sum of squared coordinate differences.
pub fn reconstruction_error(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(Error::param(format!(
            "length mismatch: {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    Ok(squared_distance(x, x_hat))
}

fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// KL(rho || q) for Bernoulli distributions, with `q` clamped away from 0 and 1.
pub fn kl_divergence(rho: f64, q: f64) -> f64 {
    let q = q.clamp(KL_CLAMP, 1.0 - KL_CLAMP);
    rho * (rho / q).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - q)).ln()
}

fn kl_derivative(rho: f64, q: f64) -> f64 {
    if !(KL_CLAMP..=1.0 - KL_CLAMP).contains(&q) {
        return 0.0;
    }
    -rho / q + (1.0 - rho) / (1.0 - q)
}

impl Autoencoder {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Autoencoder {
            input_size,
            hidden_size,
            w1: vec![0.0; hidden_size * input_size],
            b1: vec![0.0; hidden_size],
            w2: vec![0.0; input_size * hidden_size],
            b2: vec![0.0; input_size],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input_size + hidden_size) as f64).sqrt();
        let mut ae = Self::zeros(input_size, hidden_size);
        for w in ae.w1.iter_mut().chain(ae.w2.iter_mut()) {
            *w = rng.random_range(-limit..limit);
        }
        ae
    }

    pub fn validate(&self) -> Result<()> {
        let (i, h) = (self.input_size, self.hidden_size);
        if self.w1.len() != h * i
            || self.b1.len() != h
            || self.w2.len() != i * h
            || self.b2.len() != i
        {
            return Err(Error::param("weight shapes do not match layer sizes"));
        }
        if self.parameters().any(|w| !w.is_finite()) {
            return Err(Error::param("weights must be finite"));
        }
        Ok(())
    }

    fn parameters(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
    }

    fn encode_into(&self, x: &[f64], hidden: &mut [f64]) {
        for (j, h) in hidden.iter_mut().enumerate() {
            let row = &self.w1[j * self.input_size..(j + 1) * self.input_size];
            let z = self.b1[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            *h = sigmoid(z);
        }
    }

    fn decode_into(&self, hidden: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * self.hidden_size..(i + 1) * self.hidden_size];
            *o = self.b2[i] + row.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    /// Returns `(hidden activations, reconstruction)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut hidden = vec![0.0; self.hidden_size];
        let mut out = vec![0.0; self.input_size];
        self.encode_into(x, &mut hidden);
        self.decode_into(&hidden, &mut out);
        Ok((hidden, out))
    }

    /// Reconstruction error of one input.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        let (_, x_hat) = self.forward(x)?;
        Ok(squared_distance(x, &x_hat))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_size {
            return Err(Error::param(format!(
                "expected {} inputs, got {}",
                self.input_size,
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("input contains non-finite values"));
        }
        Ok(())
    }

    pub fn loss<V: AsRef<[f64]>>(&self, batch: &[V], hp: &Hyperparams) -> Result<Loss> {
        let rows = self.batch_rows(batch)?;
        Ok(self.evaluate(&rows, hp, None))
    }

    pub fn gradients<V: AsRef<[f64]>>(
        &self,
        batch: &[V],
        hp: &Hyperparams,
    ) -> Result<(Loss, Gradients)> {
        let rows = self.batch_rows(batch)?;
        let mut grads = Gradients::zeros(self.input_size, self.hidden_size);
        let loss = self.evaluate(&rows, hp, Some(&mut grads));
        Ok((loss, grads))
    }

    fn batch_rows<'a, V: AsRef<[f64]>>(&self, batch: &'a [V]) -> Result<Vec<&'a [f64]>> {
        if batch.is_empty() {
            return Err(Error::param("batch must contain at least one sample"));
        }
        batch
            .iter()
            .map(|v| {
                self.check_input(v.as_ref())?;
                Ok(v.as_ref())
            })
            .collect()
    }

    /// Loss over a batch; fills `grads` with the analytic gradient when given.
    fn evaluate(&self, rows: &[&[f64]], hp: &Hyperparams, grads: Option<&mut Gradients>) -> Loss {
        let (ni, nh) = (self.input_size, self.hidden_size);
        let batch = rows.len() as f64;
        let mut hidden = vec![0.0; rows.len() * nh];
        let mut out = vec![0.0; rows.len() * ni];
        let mut recon = 0.0;
        let mut rho_hat = vec![0.0; nh];
        for (b, x) in rows.iter().enumerate() {
            let h = &mut hidden[b * nh..(b + 1) * nh];
            self.encode_into(x, h);
            let o = &mut out[b * ni..(b + 1) * ni];
            self.decode_into(h, o);
            recon += squared_distance(x, o);
            for (r, v) in rho_hat.iter_mut().zip(h.iter()) {
                *r += v;
            }
        }
        recon /= batch;
        rho_hat.iter_mut().for_each(|r| *r /= batch);
        let rho = hp.target_sparsity;
        let sparsity: f64 = rho_hat.iter().map(|&q| kl_divergence(rho, q)).sum();
        let loss = Loss {
            total: recon + hp.sparsity_weight * sparsity,
            recon,
            sparsity,
        };

        let Some(g) = grads else {
            return loss;
        };
        // d(beta * KL)/dh_bj is the same for every sample of the batch.
        let sparse_term: Vec<f64> = rho_hat
            .iter()
            .map(|&q| hp.sparsity_weight * kl_derivative(rho, q) / batch)
            .collect();
        let mut d_out = vec![0.0; ni];
        let mut d_hid = vec![0.0; nh];
        for (b, x) in rows.iter().enumerate() {
            let h = &hidden[b * nh..(b + 1) * nh];
            let o = &out[b * ni..(b + 1) * ni];
            for i in 0..ni {
                d_out[i] = 2.0 * (o[i] - x[i]) / batch;
            }
            d_hid.copy_from_slice(&sparse_term);
            for i in 0..ni {
                let row = &self.w2[i * nh..(i + 1) * nh];
                let grow = &mut g.w2[i * nh..(i + 1) * nh];
                for j in 0..nh {
                    grow[j] += d_out[i] * h[j];
                    d_hid[j] += row[j] * d_out[i];
                }
                g.b2[i] += d_out[i];
            }
            for j in 0..nh {
                let dz = d_hid[j] * h[j] * (1.0 - h[j]);
                let grow = &mut g.w1[j * ni..(j + 1) * ni];
                for (gw, xv) in grow.iter_mut().zip(x.iter()) {
                    *gw += dz * xv;
                }
                g.b1[j] += dz;
            }
        }
        loss
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        let pairs = [
            (&mut self.w1, &g.w1),
            (&mut self.b1, &g.b1),
            (&mut self.w2, &g.w2),
            (&mut self.b2, &g.b2),
        ];
        for (w, d) in pairs {
            for (wi, di) in w.iter_mut().zip(d) {
                *wi -= lr * di;
            }
        }
    }

    /// Mean activation of each hidden unit over `data`.
    pub fn mean_hidden_activation<V: AsRef<[f64]>>(&self, data: &[V]) -> Vec<f64> {
        let mut acc = vec![0.0; self.hidden_size];
        let mut h = vec![0.0; self.hidden_size];
        for x in data {
            self.encode_into(x.as_ref(), &mut h);
            for (a, v) in acc.iter_mut().zip(&h) {
                *a += v;
            }
        }
        let n = data.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn mean_reconstruction_error<V: AsRef<[f64]>>(&self, data: &[V]) -> f64 {
        let mut h = vec![0.0; self.hidden_size];
        let mut o = vec![0.0; self.input_size];
        let total: f64 = data
            .iter()
            .map(|x| {
                self.encode_into(x.as_ref(), &mut h);
                self.decode_into(&h, &mut o);
                squared_distance(x.as_ref(), &o)
            })
            .sum();
        total / data.len().max(1) as f64
    }
}

impl Gradients {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        Gradients {
            w1: vec![0.0; hidden_size * input_size],
            b1: vec![0.0; hidden_size],
            w2: vec![0.0; input_size * hidden_size],
            b2: vec![0.0; input_size],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    /// Mean validation RE of the freshly initialized network.
    pub initial_val_re: f64,
    pub train_loss_history: Vec<f64>,
    pub val_re_history: Vec<f64>,
    /// Per-unit mean activation over the training data, for the kept weights.
    pub mean_hidden_activation: Vec<f64>,
}

impl TrainReport {
    pub fn best_val_re(&self) -> f64 {
        self.val_re_history[self.best_epoch - 1]
    }

    pub fn overall_mean_activation(&self) -> f64 {
        crate::stats::mean(&self.mean_hidden_activation)
    }
}

/// Trains on normalized data with mini-batch SGD, keeping the weights of the
/// epoch with the lowest mean validation reconstruction error.
pub fn train<V: AsRef<[f64]>>(
    train_data: &[V],
    val_data: &[V],
    hp: &Hyperparams,
    seed: u64,
) -> Result<(Autoencoder, TrainReport)> {
    hp.validate()?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::param(
            "training and validation sets must be non-empty",
        ));
    }
    let train_rows: Vec<&[f64]> = train_data.iter().map(|v| v.as_ref()).collect();
    let val_rows: Vec<&[f64]> = val_data.iter().map(|v| v.as_ref()).collect();
    for x in train_rows.iter().chain(&val_rows) {
        if x.len() != hp.input_size || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param(format!(
                "every sample must hold {} finite values",
                hp.input_size
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Autoencoder::init(hp.input_size, hp.hidden_size, &mut rng);
    let initial_val_re = net.mean_reconstruction_error(&val_rows);

    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stall = 0;
    let mut train_loss_history = Vec::new();
    let mut val_re_history = Vec::new();
    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    let mut grads = Gradients::zeros(hp.input_size, hp.hidden_size);
    let mut batch: Vec<&[f64]> = Vec::with_capacity(hp.batch_size);

    for epoch in 1..=hp.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_rows[i]));
            grads.clear();
            let loss = net.evaluate(&batch, hp, Some(&mut grads));
            if !loss.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    learning_rate: hp.learning_rate,
                    detail: format!("non-finite loss {}", loss.total),
                });
            }
            loss_sum += loss.total * chunk.len() as f64;
            net.apply(&grads, hp.learning_rate);
        }
        let val_re = net.mean_reconstruction_error(&val_rows);
        if !val_re.is_finite() {
            return Err(Error::Diverged {
                epoch,
                learning_rate: hp.learning_rate,
                detail: format!("non-finite validation error {val_re}"),
            });
        }
        train_loss_history.push(loss_sum / train_rows.len() as f64);
        val_re_history.push(val_re);

        if val_re < best_val {
            best_val = val_re;
            best_epoch = epoch;
            best.clone_from(&net);
            stall = 0;
        } else {
            stall += 1;
            if stall >= hp.patience {
                break;
            }
        }
    }

    let report = TrainReport {
        epochs_run: val_re_history.len(),
        best_epoch,
        initial_val_re,
        train_loss_history,
        val_re_history,
        mean_hidden_activation: best.mean_hidden_activation(&train_rows),
    };
    Ok((best, report))
}

impl Gradients {
    fn clear(&mut self) {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}
