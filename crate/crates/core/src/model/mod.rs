//! The encoder-decoder network: entrance convolutions, non-locally enhanced
//! dense blocks (NEDBs) joined by max-pooling / index-guided unpooling, and a
//! tanh rain-map exit added back onto the input.

mod config;
mod params;
pub mod region;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, Variant, ENCODER_DECODER_BLOCKS};
pub use params::{Conv, Nedb, NonLocal, Params};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, PoolIndices, Tensor, Var};

/// How the initial parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Fusion convolutions and the last exit convolution start at zero, so
    /// every block is an identity and the network predicts `R = 0`.
    ZeroResidual,
    /// Every tensor random, biases included. Used to exercise all gradient paths.
    Randomized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NlednModel<T = f32> {
    pub config: ModelConfig,
    pub params: Params<Tensor<T>>,
}

/// Handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `input + R`, not clamped.
    pub restored: Var,
    /// Rain map in (−1, 1).
    pub rain_map: Var,
}

/// Passed to the unpool hook just before a decoder stage consumes its indices.
pub struct UnpoolEvent<'a> {
    /// 1 for the deepest decoder stage.
    pub decoder_stage: usize,
    /// Encoder pooling stage the indices were recorded at, 1 = shallowest.
    pub encoder_stage: usize,
    pub indices: &'a mut PoolIndices,
}

#[derive(Clone, Copy)]
enum Role {
    /// Followed by relu.
    Relu,
    Linear,
    Zeroable,
}

fn conv_shape(cout: usize, cin: usize, k: usize) -> [usize; 4] {
    [cout, cin, k, k]
}

impl<T: Element> NlednModel<T> {
    pub fn init(config: ModelConfig, scheme: InitScheme) -> Result<Self> {
        config.validate()?;
        let (c, g, l) = (
            config.base_channels,
            config.growth_rate,
            config.dense_layers_per_block,
        );
        let ce = config.embed_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut draw = |shape: [usize; 4], role: Role| -> Conv<Tensor<T>> {
            let fan_in = shape[1] * shape[2] * shape[3];
            let bound = match (role, scheme) {
                (Role::Zeroable, InitScheme::ZeroResidual) => 0.0,
                (Role::Relu, _) => (6.0 / fan_in as f64).sqrt(),
                _ => (3.0 / fan_in as f64).sqrt(),
            };
            let weight = uniform_tensor(&shape, bound, &mut rng);
            let bias = match scheme {
                InitScheme::ZeroResidual => Tensor::zeros(&[shape[0]]),
                InitScheme::Randomized => uniform_tensor(&[shape[0]], 0.1, &mut rng),
            };
            Conv { weight, bias }
        };

        let entry0 = draw(conv_shape(c, 3, 3), Role::Relu);
        let entry1 = draw(conv_shape(c, c, 3), Role::Relu);
        let mut blocks = Vec::with_capacity(config.block_count());
        for _ in 0..config.block_count() {
            let nonlocal = config.nonlocal_enabled.then(|| {
                let theta = draw(conv_shape(ce, c, 1), Role::Linear).weight;
                let phi = draw(conv_shape(ce, c, 1), Role::Linear).weight;
                let g = draw(conv_shape(ce, c, 1), Role::Linear).weight;
                let restore = draw(conv_shape(c, ce, 1), Role::Linear);
                NonLocal {
                    theta,
                    phi,
                    g,
                    restore,
                }
            });
            let layers = (0..l)
                .map(|i| {
                    let cin = match (config.dense_connections_enabled, i) {
                        (true, _) => c + i * g,
                        (false, 0) => c,
                        (false, _) => g,
                    };
                    draw(conv_shape(g, cin, 3), Role::Relu)
                })
                .collect();
            let fusion_in = if config.dense_connections_enabled {
                c + l * g
            } else {
                g
            };
            let fusion = draw(conv_shape(c, fusion_in, 1), Role::Zeroable);
            blocks.push(Nedb {
                nonlocal,
                layers,
                fusion,
            });
        }
        let exit_mid = draw(conv_shape(c, c, 3), Role::Linear);
        let exit_out = draw(conv_shape(3, c, 3), Role::Zeroable);
        Ok(Self {
            config,
            params: Params {
                entry0,
                entry1,
                blocks,
                exit_mid,
                exit_out,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(|_, t| n += t.numel());
        n
    }

    pub fn cast<U: Element>(&self) -> NlednModel<U> {
        NlednModel {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }

    /// Registers every parameter as a leaf on `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Params<Var> {
        self.params
            .map(|_, t| graph.leaf(t.clone().with_grad(requires_grad)))
    }

    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        params: &Params<Var>,
        input: Var,
    ) -> Result<ForwardOutput> {
        self.forward_with_hook(graph, params, input, &mut |_| {})
    }

    /// [`forward`](Self::forward) with a callback that sees (and may alter)
    /// the pooling indices each decoder stage is about to use.
    pub fn forward_with_hook(
        &self,
        graph: &mut Graph<T>,
        params: &Params<Var>,
        input: Var,
        hook: &mut dyn FnMut(UnpoolEvent<'_>),
    ) -> Result<ForwardOutput> {
        let (c, h, w) = graph.value(input).chw()?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward (expected an RGB [3, H, W] image)",
                lhs: graph.value(input).shape().to_vec(),
                rhs: vec![3, h, w],
            });
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InputNotPadded { h, w });
        }

        let f0 = conv_relu(graph, input, &params.entry0)?;
        let f1 = conv_relu(graph, f0, &params.entry1)?;
        let grids = self.config.block_grids();

        let body = if self.config.pooling_enabled {
            let mut x = f1;
            let mut skips = Vec::with_capacity(3);
            let mut indices = Vec::with_capacity(3);
            for (block, &grid) in params.blocks[..3].iter().zip(&grids) {
                let e = self.nedb_forward(graph, x, block, grid)?;
                let (pooled, idx) = graph.max_pool2d(e)?;
                skips.push(e);
                indices.push(idx);
                x = pooled;
            }
            // the shallowest decoder stage adds the entrance features
            skips[0] = f1;
            for stage in 0..3 {
                let block = 3 + stage;
                let d = self.nedb_forward(graph, x, &params.blocks[block], grids[block])?;
                let enc = 2 - stage;
                hook(UnpoolEvent {
                    decoder_stage: stage + 1,
                    encoder_stage: enc + 1,
                    indices: &mut indices[enc],
                });
                let up = graph.max_unpool2d(d, &indices[enc])?;
                x = graph.add(up, skips[enc])?;
            }
            x
        } else {
            let mut x = f1;
            for (block, &k) in params.blocks.iter().zip(&grids) {
                x = self.nedb_forward(graph, x, block, k)?;
            }
            x
        };

        let mid = conv(graph, body, &params.exit_mid)?;
        let mid = graph.add(mid, f0)?;
        let out = conv(graph, mid, &params.exit_out)?;
        let rain_map = graph.tanh(out);
        let restored = graph.add(input, rain_map)?;
        Ok(ForwardOutput { restored, rain_map })
    }

    /// One NEDB on `[C, H, W]` with region grid `k`.
    pub fn nedb_forward(
        &self,
        graph: &mut Graph<T>,
        input: Var,
        block: &Nedb<Var>,
        k: usize,
    ) -> Result<Var> {
        let (_, h, w) = graph.value(input).chw()?;
        if h % k != 0 || w % k != 0 {
            return Err(Error::GridDivisibility { h, w, k });
        }
        let d0 = match &block.nonlocal {
            Some(nl) => {
                let regions = region::partition_var(graph, input, k)?;
                let responses = regions
                    .into_iter()
                    .map(|r| graph.nonlocal(r, nl.theta, nl.phi, nl.g, self.config.affinity_mode))
                    .collect::<Result<Vec<_>>>()?;
                let y = region::merge_var(graph, &responses, k)?;
                let z = conv(graph, y, &nl.restore)?;
                graph.add(input, z)?
            }
            None => input,
        };

        let dense = self.config.dense_connections_enabled;
        let mut features = vec![d0];
        for layer in &block.layers {
            let x = if dense {
                graph.concat(&features)?
            } else {
                *features.last().expect("non-empty")
            };
            features.push(conv_relu(graph, x, layer)?);
        }
        let fused_in = if dense {
            graph.concat(&features)?
        } else {
            *features.last().expect("non-empty")
        };
        let residual = conv(graph, fused_in, &block.fusion)?;
        graph.add(residual, input)
    }

    /// Runs the network without recording gradients. Returns the clamped
    /// estimate and the rain map.
    pub fn infer(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut graph = Graph::new();
        let params = self.bind(&mut graph, false);
        let input = graph.leaf(image.clone().with_grad(false));
        let out = self.forward(&mut graph, &params, input)?;
        let restored = graph.value(out.restored).clamp(T::zero(), T::one());
        Ok((restored, graph.value(out.rain_map).clone()))
    }
}

fn uniform_tensor<T: Element>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

fn conv<T: Element>(graph: &mut Graph<T>, x: Var, p: &Conv<Var>) -> Result<Var> {
    let k = graph.value(p.weight).shape()[2];
    graph.conv2d(x, p.weight, p.bias, (k - 1) / 2)
}

fn conv_relu<T: Element>(graph: &mut Graph<T>, x: Var, p: &Conv<Var>) -> Result<Var> {
    let y = conv(graph, x, p)?;
    Ok(graph.relu(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Uniform::new(0.0f32, 1.0);
        Tensor::from_fn(&[3, h, w], |_| d.sample(&mut rng))
    }

    #[test]
    fn param_count_matches_closed_form() {
        for v in Variant::ALL {
            let cfg = v.configure(&ModelConfig::micro());
            let m = NlednModel::<f32>::init(cfg.clone(), InitScheme::ZeroResidual).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count(), "{v}");
        }
        let m = NlednModel::<f32>::init(ModelConfig::default(), InitScheme::ZeroResidual).unwrap();
        assert_eq!(
            m.parameter_count(),
            ModelConfig::default().parameter_count()
        );
    }

    #[test]
    fn same_seed_same_params() {
        let a = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::ZeroResidual).unwrap();
        let b = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::ZeroResidual).unwrap();
        assert_eq!(a, b);
        let c = NlednModel::<f32>::init(
            ModelConfig {
                seed: 9,
                ..ModelConfig::micro()
            },
            InitScheme::ZeroResidual,
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fresh_model_is_identity() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::ZeroResidual).unwrap();
        let x = image(16, 24, 3);
        let (y, r) = m.infer(&x).unwrap();
        assert_eq!(y, x);
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_preserved_across_sizes() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::Randomized).unwrap();
        for h in [16, 32, 64] {
            for w in [16, 32, 64] {
                let (y, r) = m.infer(&image(h, w, 1)).unwrap();
                assert_eq!(y.shape(), &[3, h, w]);
                assert_eq!(r.shape(), &[3, h, w]);
            }
        }
    }

    #[test]
    fn rejects_unpadded_input() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::ZeroResidual).unwrap();
        assert!(matches!(
            m.infer(&image(12, 16, 0)),
            Err(Error::InputNotPadded { h: 12, w: 16 })
        ));
    }

    #[test]
    fn zero_fusion_block_is_identity() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::Randomized).unwrap();
        let mut zeroed = m.clone();
        for b in &mut zeroed.params.blocks {
            b.fusion.weight = Tensor::zeros(b.fusion.weight.shape());
            b.fusion.bias = Tensor::zeros(b.fusion.bias.shape());
        }
        let mut g = Graph::new();
        let p = zeroed.bind(&mut g, false);
        let x = g.leaf(Tensor::from_fn(&[4, 8, 8], |i| (i as f32 * 0.37).sin()));
        let y = zeroed.nedb_forward(&mut g, x, &p.blocks[0], 2).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn nedb_grid_divisibility() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::Randomized).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.leaf(Tensor::zeros(&[4, 6, 8]));
        let err = m.nedb_forward(&mut g, x, &p.blocks[0], 4).unwrap_err();
        assert!(matches!(err, Error::GridDivisibility { h: 6, w: 8, k: 4 }));
    }

    #[test]
    fn decoder_uses_mirrored_indices() {
        let m = NlednModel::<f32>::init(ModelConfig::micro(), InitScheme::Randomized).unwrap();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let x = g.leaf(image(32, 32, 5));
        let mut seen = Vec::new();
        m.forward_with_hook(&mut g, &p, x, &mut |ev| {
            seen.push((ev.decoder_stage, ev.encoder_stage, ev.indices.source_hw()));
        })
        .unwrap();
        assert_eq!(
            seen,
            vec![(1, 3, (8, 8)), (2, 2, (16, 16)), (3, 1, (32, 32))]
        );
    }
}
