use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::AffinityMode;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub growth_rate: usize,
    pub dense_layers_per_block: usize,
    /// Region grid per encoder block, shallowest first.
    pub encoder_grids: Vec<usize>,
    /// Region grid per decoder block, deepest first; 1 means the whole map.
    pub decoder_grids: Vec<usize>,
    pub nonlocal_enabled: bool,
    pub dense_connections_enabled: bool,
    /// Max-pooling with recorded indices and index-guided unpooling.
    pub pooling_enabled: bool,
    /// Block count for the flat (unpooled) chain. The encoder-decoder always has six.
    pub num_blocks: usize,
    pub affinity_mode: AffinityMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            growth_rate: 32,
            dense_layers_per_block: 4,
            encoder_grids: vec![8, 4, 2],
            decoder_grids: vec![1, 2, 4],
            nonlocal_enabled: true,
            dense_connections_enabled: true,
            pooling_enabled: true,
            num_blocks: 6,
            affinity_mode: AffinityMode::Softmax,
            seed: 0,
        }
    }
}

/// Number of NEDBs in the encoder-decoder.
pub const ENCODER_DECODER_BLOCKS: usize = 6;

impl ModelConfig {
    /// Smallest configuration used for gradient checks and overfit runs.
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            growth_rate: 2,
            dense_layers_per_block: 2,
            ..Self::default()
        }
    }

    /// Width of the non-local embeddings.
    pub fn embed_channels(&self) -> usize {
        (self.base_channels / 2).max(1)
    }

    pub fn block_count(&self) -> usize {
        if self.pooling_enabled {
            ENCODER_DECODER_BLOCKS
        } else {
            self.num_blocks
        }
    }

    /// Region grid for every block in execution order. The flat chain cycles
    /// through the encoder grids followed by the decoder grids.
    pub fn block_grids(&self) -> Vec<usize> {
        let cycle: Vec<usize> = self
            .encoder_grids
            .iter()
            .chain(&self.decoder_grids)
            .copied()
            .collect();
        if cycle.is_empty() {
            return vec![1; self.block_count()];
        }
        (0..self.block_count())
            .map(|b| cycle[b % cycle.len()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.base_channels == 0 || self.growth_rate == 0 || self.dense_layers_per_block == 0 {
            return bad(
                "base_channels, growth_rate and dense_layers_per_block must be >= 1".into(),
            );
        }
        if self.pooling_enabled && (self.encoder_grids.len() != 3 || self.decoder_grids.len() != 3)
        {
            return bad(format!(
                "encoder_grids and decoder_grids need 3 entries with pooling, got {:?} / {:?}",
                self.encoder_grids, self.decoder_grids
            ));
        }
        if !self.pooling_enabled && self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        for &k in self.encoder_grids.iter().chain(&self.decoder_grids) {
            if !matches!(k, 1 | 2 | 4 | 8) {
                return bad(format!("grid size {k} is not a power of two in 1..=8"));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count, independent of any instantiated model.
    pub fn parameter_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let (c, g, l) = (
            self.base_channels,
            self.growth_rate,
            self.dense_layers_per_block,
        );
        let ce = self.embed_channels();
        let nonlocal = if self.nonlocal_enabled {
            3 * ce * c + conv(ce, c, 1)
        } else {
            0
        };
        let (layers, fusion_in) = if self.dense_connections_enabled {
            (
                (0..l).map(|i| conv(c + i * g, g, 3)).sum::<usize>(),
                c + l * g,
            )
        } else {
            (conv(c, g, 3) + (l - 1) * conv(g, g, 3), g)
        };
        let block = nonlocal + layers + conv(fusion_in, c, 1);
        conv(3, c, 3) + conv(c, c, 3) + self.block_count() * block + conv(c, c, 3) + conv(c, 3, 3)
    }
}

/// Ablation ladder: each step toggles one architectural component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// One block, plain chained convolutions.
    Ra,
    /// One block with dense connections.
    Rb,
    /// Six dense blocks in a flat chain.
    Rc,
    /// Six dense blocks in the pooled encoder-decoder.
    Rd,
    /// Six dense blocks with non-local enhancement, flat.
    Re,
    /// Full model.
    Rf,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ra,
        Variant::Rb,
        Variant::Rc,
        Variant::Rd,
        Variant::Re,
        Variant::Rf,
    ];

    /// Applies the variant's switches to `base`, keeping widths, grids and seed.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (blocks, dense, pooling, nonlocal) = match self {
            Variant::Ra => (1, false, false, false),
            Variant::Rb => (1, true, false, false),
            Variant::Rc => (6, true, false, false),
            Variant::Rd => (6, true, true, false),
            Variant::Re => (6, true, false, true),
            Variant::Rf => (6, true, true, true),
        };
        ModelConfig {
            num_blocks: blocks,
            dense_connections_enabled: dense,
            pooling_enabled: pooling,
            nonlocal_enabled: nonlocal,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s.to_ascii_lowercase().replace('_', "").as_str() {
            "ra" => Variant::Ra,
            "rb" => Variant::Rb,
            "rc" => Variant::Rc,
            "rd" => Variant::Rd,
            "re" => Variant::Re,
            "rf" => Variant::Rf,
            other => return Err(Error::Config(format!("unknown variant `{other}` (Ra..Rf)"))),
        };
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_count_micro() {
        // entry 112 + 148, six blocks of (36 nonlocal + 74 + 110 dense + 36 fusion), exit 148 + 111
        assert_eq!(
            ModelConfig::micro().parameter_count(),
            112 + 148 + 6 * 256 + 148 + 111
        );
    }

    #[test]
    fn fusion_input_channels() {
        let cfg = ModelConfig {
            base_channels: 8,
            growth_rate: 4,
            dense_layers_per_block: 4,
            ..ModelConfig::default()
        };
        let with = cfg.parameter_count();
        let without = ModelConfig {
            nonlocal_enabled: false,
            ..cfg.clone()
        }
        .parameter_count();
        // nonlocal: 3·4·8 embeddings + 1×1 restore 4→8 with bias
        assert_eq!((with - without) / 6, 96 + 40);
        // 8 + 4·4 = 24 fusion inputs
        let fusion = 24 * 8 + 8;
        let layers: usize = (0..4).map(|l| 4 * (8 + 4 * l) * 9 + 4).sum();
        assert_eq!((without - 224 - 584 - 584 - 219) / 6, fusion + layers);
    }

    #[test]
    fn ladder_counts_increase() {
        let base = ModelConfig::micro();
        let count = |v: Variant| v.configure(&base).parameter_count();
        assert!(count(Variant::Ra) < count(Variant::Rb));
        assert!(count(Variant::Rb) < count(Variant::Rc));
        assert_eq!(Variant::Rf.configure(&base), base);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut cfg = ModelConfig {
            encoder_grids: vec![8, 4],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.encoder_grids = vec![8, 3, 2];
        assert!(cfg.validate().is_err());
        cfg.encoder_grids = vec![16, 4, 2];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn flat_grids_cycle() {
        let cfg = Variant::Re.configure(&ModelConfig::default());
        assert_eq!(cfg.block_grids(), vec![8, 4, 2, 1, 2, 4]);
        let one = Variant::Ra.configure(&ModelConfig::default());
        assert_eq!(one.block_grids(), vec![8]);
    }
}
