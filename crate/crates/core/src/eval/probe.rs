//! Logistic-regression probe on mean-pooled sentence representations.

use ndarray::{Array1, Array2, Axis};

use crate::encoder::{Encoder, LoraParamSet};
use crate::transform::toy::labeled_toy_corpus;
use crate::transform::TokenSentence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// SAE sentences the probe is fitted on.
    pub train_sentences: usize,
    /// Full-batch gradient steps.
    pub steps: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { train_sentences: 256, steps: 500, learning_rate: 0.5, l2: 1e-3, seed: 0 }
    }
}

/// Row-wise mean of each sentence's token representations.
pub fn mean_pool(enc: &Encoder, lora: Option<&LoraParamSet>, sentences: &[TokenSentence]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((sentences.len(), enc.config().d_model));
    for (i, s) in sentences.iter().enumerate() {
        let h = enc.encode(lora, s)?;
        out.row_mut(i).assign(&h.mean_axis(Axis(0)).expect("sentences are non-empty"));
    }
    Ok(out)
}

/// Standardised logistic regression; frozen once fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub w: Array1<f64>,
    pub b: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LinearProbe {
    pub fn fit(x: &Array2<f64>, y: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::Argument(format!("{} rows for {} labels", x.nrows(), y.len())));
        }
        if y.iter().all(|&v| v == y[0]) {
            return Err(Error::Argument("probe data has a single class".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
        let z = (x - &mean) * &scale;
        let t: Array1<f64> = y.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let n = y.len() as f64;
        let mut w = Array1::zeros(x.ncols());
        let mut b = 0.0;
        for _ in 0..cfg.steps {
            let p = (z.dot(&w) + b).mapv(sigmoid);
            let r = &p - &t;
            let gw = z.t().dot(&r) / n + cfg.l2 * &w;
            let gb = r.sum() / n;
            w.scaled_add(-cfg.learning_rate, &gw);
            b -= cfg.learning_rate * gb;
        }
        Ok(Self { mean, scale, w, b })
    }

    /// Fits on the SAE toy sentences of `cfg.seed`, labelled by whether the
    /// sentence mentions an animal.
    pub fn fit_toy(enc: &Encoder, cfg: &ProbeConfig) -> Result<Self> {
        let data = labeled_toy_corpus(cfg.train_sentences, cfg.seed);
        let sents: Vec<TokenSentence> = data.iter().map(|d| d.sentence.clone()).collect();
        let y: Vec<bool> = data.iter().map(|d| d.label).collect();
        Self::fit(&mean_pool(enc, None, &sents)?, &y, cfg)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<bool> {
        let z = (x - &self.mean) * &self.scale;
        (z.dot(&self.w) + self.b).iter().map(|&v| v > 0.0).collect()
    }
}
