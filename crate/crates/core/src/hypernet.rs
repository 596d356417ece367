//! Hypernetworks mapping a dialect feature vector to LoRA factors.
//!
//! For block `k` and role `ρ` (query 0, value 1) the input is
//! `x = [d ; onehot(2k + ρ)]`. Two MLPs of the form
//! `relu(x W_d + b_d) W_u + b_u` produce the down-projection `D` (from `g`)
//! and the up-projection `U` (from `g′`), reshaped row-major to
//! `d_model × r` and `r × d_model`.

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{find, Tensor};
use crate::encoder::{EncoderConfig, LoraBlock, LoraParamSet};
use crate::kernels::{add_row, matmul, relu};
use crate::typology::FeatureVector;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitScheme {
    /// Up-path output layer zeroed, so every generated `U` is zero.
    ZeroOutput,
    SmallUniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Value,
}

impl Role {
    pub fn index(self) -> usize {
        match self {
            Role::Query => 0,
            Role::Value => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetConfig {
    pub feature_dim: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub r: usize,
    pub hidden_dim: usize,
    pub init_scheme: InitScheme,
}

impl HypernetConfig {
    pub fn for_encoder(enc: &EncoderConfig, feature_dim: usize) -> Self {
        Self {
            feature_dim,
            n_blocks: enc.n_blocks,
            d_model: enc.d_model,
            r: enc.lora_rank,
            hidden_dim: 16,
            init_scheme: InitScheme::ZeroOutput,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + 2 * self.n_blocks
    }

    pub fn output_dim(&self) -> usize {
        self.d_model * self.r
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_blocks == 0 || self.d_model == 0 || self.r == 0 {
            return Err(Error::Config("hypernetwork dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Checks that generated adapters fit `enc`.
    pub fn check_encoder(&self, enc: &EncoderConfig) -> Result<()> {
        if (self.n_blocks, self.d_model, self.r) != (enc.n_blocks, enc.d_model, enc.lora_rank) {
            return Err(Error::Config(format!(
                "hypernetwork targets {} blocks, d_model {}, rank {}; encoder has {}, {}, {}",
                self.n_blocks, self.d_model, self.r, enc.n_blocks, enc.d_model, enc.lora_rank
            )));
        }
        Ok(())
    }
}

/// One two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `input_dim × hidden_dim`
    pub w_d: Array2<f64>,
    pub b_d: Array1<f64>,
    /// `hidden_dim × output_dim`
    pub w_u: Array2<f64>,
    pub b_u: Array1<f64>,
}

impl Mlp {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w_d: Array2::zeros((input, hidden)),
            b_d: Array1::zeros(hidden),
            w_u: Array2::zeros((hidden, output)),
            b_u: Array1::zeros(output),
        }
    }

    fn uniform(rng: &mut ChaCha8Rng, input: usize, hidden: usize, output: usize) -> Self {
        let a = 1.0 / (input as f64).sqrt();
        let b = 1.0 / (hidden as f64).sqrt();
        Self {
            w_d: Array2::from_shape_simple_fn((input, hidden), || rng.random_range(-a..a)),
            b_d: Array1::zeros(hidden),
            w_u: Array2::from_shape_simple_fn((hidden, output), || rng.random_range(-b..b)),
            b_u: Array1::zeros(output),
        }
    }

    /// `relu(X W_d + b_d) W_u + b_u` row by row.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let hidden = add_row(&matmul(&x.view(), &self.w_d.view()).view(), &self.b_d.view()).mapv(relu);
        add_row(&matmul(&hidden.view(), &self.w_u.view()).view(), &self.b_u.view())
    }

    fn parts(&self) -> [&[f64]; 4] {
        [
            self.w_d.as_slice().unwrap(),
            self.b_d.as_slice().unwrap(),
            self.w_u.as_slice().unwrap(),
            self.b_u.as_slice().unwrap(),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w_d.as_slice_mut().unwrap(),
            self.b_d.as_slice_mut().unwrap(),
            self.w_u.as_slice_mut().unwrap(),
            self.b_u.as_slice_mut().unwrap(),
        ]
    }
}

/// Weights of `g` (down) and `g′` (up). Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HypernetWeights {
    pub down: Mlp,
    pub up: Mlp,
}

const TENSOR_NAMES: [&str; 4] = ["W_d", "b_d", "W_u", "b_u"];

impl HypernetWeights {
    pub fn init(cfg: &HypernetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, h, o) = (cfg.input_dim(), cfg.hidden_dim, cfg.output_dim());
        let down = Mlp::uniform(&mut rng, i, h, o);
        let mut up = Mlp::uniform(&mut rng, i, h, o);
        if cfg.init_scheme == InitScheme::ZeroOutput {
            up.w_u.fill(0.0);
        }
        Ok(Self { down, up })
    }

    pub fn zeros(cfg: &HypernetConfig) -> Self {
        let (i, h, o) = (cfg.input_dim(), cfg.hidden_dim, cfg.output_dim());
        Self { down: Mlp::zeros(i, h, o), up: Mlp::zeros(i, h, o) }
    }

    pub fn param_count(&self) -> usize {
        self.flat_len()
    }

    fn flat_len(&self) -> usize {
        self.down.parts().iter().chain(self.up.parts().iter()).map(|p| p.len()).sum()
    }

    /// All scalars in a fixed order: down `W_d, b_d, W_u, b_u`, then up.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for p in self.down.parts().iter().chain(self.up.parts().iter()) {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.flat_len() {
            return Err(Error::Config(format!(
                "{} values for {} hypernetwork parameters",
                values.len(),
                self.flat_len()
            )));
        }
        let mut offset = 0;
        let Self { down, up } = self;
        for p in down.parts_mut().into_iter().chain(up.parts_mut()) {
            let n = p.len();
            p.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Name of the tensor holding flat index `i`, with the index inside it.
    pub fn locate(&self, mut i: usize) -> Option<(String, usize)> {
        for (net, mlp) in [("down", &self.down), ("up", &self.up)] {
            for (name, p) in TENSOR_NAMES.iter().zip(mlp.parts()) {
                if i < p.len() {
                    return Some((format!("{net}/{name}"), i));
                }
                i -= p.len();
            }
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Tensors named `hypernet/{down,up}/{W_d,b_d,W_u,b_u}`.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (net, m) in [("down", &self.down), ("up", &self.up)] {
            out.push(Tensor::from_matrix(format!("hypernet/{net}/W_d"), &m.w_d));
            out.push(Tensor::from_vector(format!("hypernet/{net}/b_d"), &m.b_d));
            out.push(Tensor::from_matrix(format!("hypernet/{net}/W_u"), &m.w_u));
            out.push(Tensor::from_vector(format!("hypernet/{net}/b_u"), &m.b_u));
        }
        out
    }

    pub fn from_tensors(cfg: &HypernetConfig, tensors: &[Tensor]) -> Result<Self> {
        let mut w = Self::zeros(cfg);
        for (net, m) in [("down", &mut w.down), ("up", &mut w.up)] {
            let get = |n: &str| find(tensors, &format!("hypernet/{net}/{n}"));
            let w_d = get("W_d")?.to_matrix()?;
            let b_d = get("b_d")?.to_vector()?;
            let w_u = get("W_u")?.to_matrix()?;
            let b_u = get("b_u")?.to_vector()?;
            if w_d.dim() != m.w_d.dim() || b_d.len() != m.b_d.len() || w_u.dim() != m.w_u.dim() || b_u.len() != m.b_u.len() {
                return Err(Error::Config(format!("hypernet/{net} tensor shapes do not match the configuration")));
            }
            *m = Mlp { w_d, b_d, w_u, b_u };
        }
        Ok(w)
    }
}

/// Trainable scalars of both MLPs, biases included.
pub fn param_count(cfg: &HypernetConfig) -> usize {
    let (i, h, o) = (cfg.input_dim(), cfg.hidden_dim, cfg.output_dim());
    2 * (i * h + h + h * o + o)
}

fn check_features(d: &FeatureVector, cfg: &HypernetConfig) -> Result<()> {
    if d.len() != cfg.feature_dim {
        return Err(Error::Config(format!(
            "feature vector {} has {} features, hypernetwork expects {}",
            d.dialect_id(),
            d.len(),
            cfg.feature_dim
        )));
    }
    Ok(())
}

pub fn positional_input(d: &FeatureVector, block: usize, role: Role, cfg: &HypernetConfig) -> Result<Array1<f64>> {
    if block >= cfg.n_blocks {
        return Err(Error::Argument(format!("block {block} out of range for {} blocks", cfg.n_blocks)));
    }
    check_features(d, cfg)?;
    let mut x = Array1::zeros(cfg.input_dim());
    x.slice_mut(s![..cfg.feature_dim]).assign(&Array1::from_vec(d.rates().to_vec()));
    x[cfg.feature_dim + 2 * block + role.index()] = 1.0;
    Ok(x)
}

/// One input row per `(block, role)`, row `2·block + role`.
pub fn input_matrix(d: &FeatureVector, cfg: &HypernetConfig) -> Result<Array2<f64>> {
    check_features(d, cfg)?;
    let rows = 2 * cfg.n_blocks;
    let mut x = Array2::zeros((rows, cfg.input_dim()));
    for i in 0..rows {
        x.slice_mut(s![i, ..cfg.feature_dim]).assign(&Array1::from_vec(d.rates().to_vec()));
        x[[i, cfg.feature_dim + i]] = 1.0;
    }
    Ok(x)
}

/// Splits stacked MLP outputs into per-block LoRA factors.
pub(crate) fn assemble(cfg: &HypernetConfig, down: &Array2<f64>, up: &Array2<f64>) -> LoraParamSet {
    let (d, r) = (cfg.d_model, cfg.r);
    let reshape = |m: &Array2<f64>, row: usize, shape: (usize, usize)| {
        Array2::from_shape_vec(shape, m.row(row).to_vec()).expect("output_dim = d_model · r")
    };
    let blocks = (0..cfg.n_blocks)
        .map(|k| LoraBlock {
            dq: reshape(down, 2 * k, (d, r)),
            uq: reshape(up, 2 * k, (r, d)),
            dv: reshape(down, 2 * k + 1, (d, r)),
            uv: reshape(up, 2 * k + 1, (r, d)),
        })
        .collect();
    LoraParamSet { blocks }
}

pub fn generate_lora(hw: &HypernetWeights, d: &FeatureVector, cfg: &HypernetConfig) -> Result<LoraParamSet> {
    let x = input_matrix(d, cfg)?;
    if hw.down.w_d.dim() != (cfg.input_dim(), cfg.hidden_dim) || hw.up.w_u.ncols() != cfg.output_dim() {
        return Err(Error::Config("hypernetwork weights do not match the configuration".into()));
    }
    Ok(assemble(cfg, &hw.down.forward(&x), &hw.up.forward(&x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_cfg(f: usize) -> HypernetConfig {
        HypernetConfig { feature_dim: f, n_blocks: 2, d_model: 4, r: 2, hidden_dim: 5, init_scheme: InitScheme::SmallUniform }
    }

    fn fv(rates: &[f64]) -> FeatureVector {
        FeatureVector::from_pairs("X", rates.iter().enumerate().map(|(i, &r)| (i.to_string(), r))).unwrap()
    }

    #[test]
    fn positional_layout() {
        let cfg = small_cfg(3);
        let d = fv(&[0.3, 0.6, 1.0]);
        let x = positional_input(&d, 0, Role::Query, &cfg).unwrap();
        assert_eq!(x.to_vec(), vec![0.3, 0.6, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let y = positional_input(&d, 1, Role::Value, &cfg).unwrap();
        assert_eq!(y[6], 1.0);
        assert_ne!(x, y);
        assert!(positional_input(&d, 2, Role::Query, &cfg).is_err());
        let m = input_matrix(&d, &cfg).unwrap();
        assert_eq!(m.row(3).to_owned(), y);
    }

    #[test]
    fn zero_output_layer_gives_zero_adapters() {
        let cfg = small_cfg(3);
        let mut hw = HypernetWeights::init(&cfg, 1).unwrap();
        hw.down.w_u.fill(0.0);
        hw.up.w_u.fill(0.0);
        let l = generate_lora(&hw, &fv(&[1.0, 0.0, 0.6]), &cfg).unwrap();
        assert!(l.is_zero());
    }

    #[test]
    fn zero_output_init_zeroes_up_factors() {
        let cfg = HypernetConfig { init_scheme: InitScheme::ZeroOutput, ..small_cfg(3) };
        let hw = HypernetWeights::init(&cfg, 4).unwrap();
        let l = generate_lora(&hw, &fv(&[1.0, 0.3, 0.6]), &cfg).unwrap();
        assert!(l.blocks.iter().all(|b| b.uq.iter().chain(b.uv.iter()).all(|&v| v == 0.0)));
        assert!(l.blocks.iter().any(|b| b.dq.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn hand_computed_scalar_case() {
        // F = 1, one block, hidden 1, d_model = r = 1.
        let cfg = HypernetConfig { feature_dim: 1, n_blocks: 1, d_model: 1, r: 1, hidden_dim: 1, init_scheme: InitScheme::SmallUniform };
        let hw = HypernetWeights {
            down: Mlp { w_d: array![[2.0], [0.5], [-1.0]], b_d: array![0.1], w_u: array![[3.0]], b_u: array![0.2] },
            up: Mlp { w_d: array![[-1.0], [1.0], [0.25]], b_d: array![0.0], w_u: array![[-2.0]], b_u: array![1.0] },
        };
        let l = generate_lora(&hw, &fv(&[0.6]), &cfg).unwrap();
        // query row x = [0.6, 1, 0]: down hidden relu(1.2 + 0.5 + 0.1) = 1.8
        assert!((l.blocks[0].dq[[0, 0]] - (1.8 * 3.0 + 0.2)).abs() < 1e-15);
        // up hidden relu(-0.6 + 1) = 0.4
        assert!((l.blocks[0].uq[[0, 0]] - (0.4 * -2.0 + 1.0)).abs() < 1e-15);
        // value row x = [0.6, 0, 1]: down hidden relu(1.2 - 1 + 0.1) = 0.3
        assert!((l.blocks[0].dv[[0, 0]] - (0.3 * 3.0 + 0.2)).abs() < 1e-15);
        // up hidden relu(-0.6 + 0.25) = 0
        assert_eq!(l.blocks[0].uv[[0, 0]], 1.0);
    }

    #[test]
    fn counting() {
        let cfg = HypernetConfig { feature_dim: 1, n_blocks: 1, d_model: 1, r: 1, hidden_dim: 1, init_scheme: InitScheme::ZeroOutput };
        // input_dim is 3 here because of the two positional slots.
        assert_eq!(param_count(&cfg), 2 * (3 + 1 + 1 + 1));
        let big = HypernetConfig::for_encoder(&EncoderConfig::default(), 236);
        let hw = HypernetWeights::init(&big, 0).unwrap();
        let by_shapes: usize = hw.tensors().iter().map(|t| t.shape.iter().product::<usize>()).sum();
        assert_eq!(param_count(&big), by_shapes);
        assert_eq!(hw.param_count(), by_shapes);
    }

    #[test]
    fn flat_roundtrip_and_locate() {
        let cfg = small_cfg(2);
        let hw = HypernetWeights::init(&cfg, 9).unwrap();
        let mut other = HypernetWeights::zeros(&cfg);
        other.set_flat(&hw.to_flat()).unwrap();
        assert_eq!(other, hw);
        let (name, _) = hw.locate(hw.param_count() - 1).unwrap();
        assert_eq!(name, "up/b_u");
        assert!(hw.locate(hw.param_count()).is_none());
        let back = HypernetWeights::from_tensors(&cfg, &hw.tensors()).unwrap();
        assert_eq!(back, hw);
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let cfg = small_cfg(3);
        let hw = HypernetWeights::init(&cfg, 0).unwrap();
        assert!(matches!(generate_lora(&hw, &fv(&[0.1, 0.2]), &cfg), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn small_feature_changes_move_adapters_a_little(
            seed in 0u64..1000,
            rates in proptest::collection::vec(0.0f64..1.0, 4),
            k in 0usize..4,
            delta in -1e-3f64..1e-3,
        ) {
            let cfg = small_cfg(4);
            let hw = HypernetWeights::init(&cfg, seed).unwrap();
            let mut moved = rates.clone();
            moved[k] = (moved[k] + delta).clamp(0.0, 1.0);
            let a = generate_lora(&hw, &fv(&rates), &cfg).unwrap();
            let b = generate_lora(&hw, &fv(&moved), &cfg).unwrap();
            let step = (moved[k] - rates[k]).abs();
            // |W_u|·|W_d| entries are bounded by 1, so each output moves at
            // most hidden_dim times the input step.
            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                for (p, q) in [(&x.dq, &y.dq), (&x.uq, &y.uq), (&x.dv, &y.dv), (&x.uv, &y.uv)] {
                    for (u, v) in p.iter().zip(q.iter()) {
                        prop_assert!((u - v).abs() <= cfg.hidden_dim as f64 * step + 1e-15);
                    }
                }
            }
        }
    }
}
