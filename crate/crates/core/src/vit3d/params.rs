use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::numcore::{NdArray, Real, Tape, Var};

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.gain",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

fn take<T>(it: &mut impl Iterator<Item = T>) -> T {
    it.next().expect("parameter stream ended early")
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub qkv_weight: T,
    pub qkv_bias: T,
    pub proj_weight: T,
    pub proj_bias: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

impl<T> Block<T> {
    fn fields(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || take(it);
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            qkv_weight: next(),
            qkv_bias: next(),
            proj_weight: next(),
            proj_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }
}

/// Every trainable array of the network, generic over the storage so the
/// same layout serves concrete values, tape handles and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub embed_weight: T,
    pub embed_bias: T,
    pub pos_embed: T,
    pub blocks: Vec<Block<T>>,
    pub decoder_weight: T,
    pub decoder_bias: T,
    pub cls_token: T,
    pub summariser: Block<T>,
    pub head_fc1_weight: T,
    pub head_fc1_bias: T,
    pub head_fc2_weight: T,
    pub head_fc2_bias: T,
    /// Directions of the weight-normalised output layer; rows are
    /// normalised in the forward pass and the gain is fixed at 1.
    pub head_last_direction: T,
}

pub type ModelParams = Model<NdArray>;
pub type ModelVars = Model<Var>;

impl<T> Model<T> {
    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["embed.weight", "embed.bias", "pos_embed"].map(String::from).to_vec();
        for i in 0..self.blocks.len() {
            names.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{i}.{f}")));
        }
        names.extend(["decoder.weight", "decoder.bias", "cls_token"].map(String::from));
        names.extend(BLOCK_FIELDS.iter().map(|f| format!("summariser.{f}")));
        names.extend(
            ["head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias", "head.last.direction"]
                .map(String::from),
        );
        names
    }

    /// References in canonical order.
    pub fn values(&self) -> Vec<&T> {
        let mut v = vec![&self.embed_weight, &self.embed_bias, &self.pos_embed];
        for b in &self.blocks {
            v.extend(b.fields());
        }
        v.extend([&self.decoder_weight, &self.decoder_bias, &self.cls_token]);
        v.extend(self.summariser.fields());
        v.extend([
            &self.head_fc1_weight,
            &self.head_fc1_bias,
            &self.head_fc2_weight,
            &self.head_fc2_bias,
            &self.head_last_direction,
        ]);
        v
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.embed_weight, &mut self.embed_bias, &mut self.pos_embed];
        for b in &mut self.blocks {
            v.extend(b.fields_mut());
        }
        v.extend([&mut self.decoder_weight, &mut self.decoder_bias, &mut self.cls_token]);
        v.extend(self.summariser.fields_mut());
        v.extend([
            &mut self.head_fc1_weight,
            &mut self.head_fc1_bias,
            &mut self.head_fc2_weight,
            &mut self.head_fc2_bias,
            &mut self.head_last_direction,
        ]);
        v
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        self.names().into_iter().zip(self.values()).collect()
    }

    /// Rebuild from values in canonical order for a model of `depth` blocks.
    pub fn from_values(depth: usize, values: impl IntoIterator<Item = T>) -> Self {
        let mut it = values.into_iter();
        let (embed_weight, embed_bias, pos_embed) = (take(&mut it), take(&mut it), take(&mut it));
        let blocks = (0..depth).map(|_| Block::from_iter(&mut it)).collect();
        let (decoder_weight, decoder_bias, cls_token) = (take(&mut it), take(&mut it), take(&mut it));
        let summariser = Block::from_iter(&mut it);
        Self {
            embed_weight,
            embed_bias,
            pos_embed,
            blocks,
            decoder_weight,
            decoder_bias,
            cls_token,
            summariser,
            head_fc1_weight: take(&mut it),
            head_fc1_bias: take(&mut it),
            head_fc2_weight: take(&mut it),
            head_fc2_bias: take(&mut it),
            head_last_direction: take(&mut it),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Model<U> {
        let names = self.names();
        let mapped: Vec<U> = names.iter().zip(self.values()).map(|(n, v)| f(n, v)).collect();
        Model::from_values(self.blocks.len(), mapped)
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl Model<Vec<usize>> {
    /// Expected array shapes for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let h = d * cfg.mlp_ratio;
        let pv = cfg.patch_volume();
        let n_pos: usize = cfg.pos_grid.iter().product();
        let block = || Block {
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            qkv_weight: vec![d, 3 * d],
            qkv_bias: vec![3 * d],
            proj_weight: vec![d, d],
            proj_bias: vec![d],
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            fc1_weight: vec![d, h],
            fc1_bias: vec![h],
            fc2_weight: vec![h, d],
            fc2_bias: vec![d],
        };
        Self {
            embed_weight: vec![pv, d],
            embed_bias: vec![d],
            pos_embed: vec![n_pos, d],
            blocks: (0..cfg.depth).map(|_| block()).collect(),
            decoder_weight: vec![d, pv],
            decoder_bias: vec![pv],
            cls_token: vec![1, d],
            summariser: block(),
            head_fc1_weight: vec![d, 2 * d],
            head_fc1_bias: vec![2 * d],
            head_fc2_weight: vec![2 * d, d],
            head_fc2_bias: vec![d],
            head_last_direction: vec![cfg.out_dim, d],
        }
    }
}

impl ModelParams {
    /// Gaussian weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Model::shapes(cfg).map(|name, shape| {
            if name.ends_with(".gain") {
                NdArray::full(shape, 1.0)
            } else if name.ends_with(".bias") {
                NdArray::zeros(shape)
            } else {
                NdArray::from_fn(shape, |_| normal.sample(&mut rng) as Real)
            }
        }))
    }

    /// Validate names and shapes of loaded arrays against `cfg`.
    pub fn from_named(cfg: &ModelConfig, arrays: Vec<(String, NdArray)>) -> Result<Self, ModelError> {
        let shapes = Model::shapes(cfg);
        let mut by_name: std::collections::HashMap<String, NdArray> = arrays.into_iter().collect();
        let mut values = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes.named() {
            let a = by_name.remove(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if a.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape { name, expected: shape.clone(), found: a.shape().to_vec() });
            }
            values.push(a);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ModelError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(Model::from_values(cfg.depth, values))
    }

    /// Register every array on `tape`, as trainable leaves or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        self.map(|_, a| if trainable { tape.param(a.clone()) } else { tape.constant(a.clone()) })
    }

    pub fn parameter_count(&self) -> usize {
        self.values().iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|a| a.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_values_align() {
        let cfg = ModelConfig { depth: 2, dim: 8, heads: 2, summariser_heads: 8, out_dim: 4, ..ModelConfig::desk() };
        let p = ModelParams::init(&cfg, 0).unwrap();
        assert_eq!(p.names().len(), p.values().len());
        assert_eq!(p.names().len(), 3 + 2 * 12 + 3 + 12 + 5);
        let round =
            ModelParams::from_named(&cfg, p.named().into_iter().map(|(n, a)| (n, a.clone())).collect()).unwrap();
        assert_eq!(round, p);
    }
}
