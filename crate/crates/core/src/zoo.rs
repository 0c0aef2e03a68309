//! Model construction: splittable classifiers, bottleneck layers, inversion
//! decoder tiers and FLOP accounting.
//!
//! Architecture spec strings use the grammar `conv<C>[k<K>][s<S>] | pool |
//! fc[<N>]` joined by `-`, e.g. `conv8k3s1-pool-conv16k3s1-pool-conv32k3s1-fc`.
//! Kernel defaults to 3, stride to 1, padding is always k/2; every conv is
//! followed by an implicit ReLU and a Flatten is inserted before the first fc.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, Conv2d, ConvTranspose2d, Dense, Flatten, Layer, MaxPool2x2, Network, Relu, Sigmoid};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Default desk-scale classifier.
pub const DESK_ARCH: &str = "conv8k3s1-pool-conv16k3s1-pool-conv32k3s1-fc";
pub const DESK_CUT_LAYER: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchToken {
    Conv {
        channels: usize,
        kernel: usize,
        stride: usize,
    },
    Pool,
    Fc {
        units: Option<usize>,
    },
}

pub fn parse_arch_spec(spec: &str) -> Result<Vec<ArchToken>> {
    let bad = |reason: &str| Error::BadArchSpec {
        spec: spec.to_string(),
        reason: reason.to_string(),
    };
    let mut tokens = Vec::new();
    for part in spec.split('-') {
        if part == "pool" {
            tokens.push(ArchToken::Pool);
        } else if let Some(rest) = part.strip_prefix("conv") {
            let (channels, rest) = take_number(rest).ok_or_else(|| bad("conv needs a channel count"))?;
            let (kernel, rest) = match rest.strip_prefix('k') {
                Some(r) => take_number(r).ok_or_else(|| bad("k needs a value"))?,
                None => (3, rest),
            };
            let (stride, rest) = match rest.strip_prefix('s') {
                Some(r) => take_number(r).ok_or_else(|| bad("s needs a value"))?,
                None => (1, rest),
            };
            if !rest.is_empty() {
                return Err(bad(&format!("trailing `{rest}` after conv token")));
            }
            if channels == 0 || kernel == 0 || stride == 0 {
                return Err(bad("conv channels/kernel/stride must be >= 1"));
            }
            tokens.push(ArchToken::Conv {
                channels,
                kernel,
                stride,
            });
        } else if let Some(rest) = part.strip_prefix("fc") {
            let units = if rest.is_empty() {
                None
            } else {
                let (u, rest) = take_number(rest).ok_or_else(|| bad("fc takes a unit count"))?;
                if !rest.is_empty() {
                    return Err(bad(&format!("trailing `{rest}` after fc token")));
                }
                Some(u)
            };
            tokens.push(ArchToken::Fc { units });
        } else {
            return Err(bad(&format!("unknown token `{part}`")));
        }
    }
    if tokens.is_empty() {
        return Err(bad("empty spec"));
    }
    Ok(tokens)
}

fn take_number(s: &str) -> Option<(usize, &str)> {
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    if end == 0 {
        return None;
    }
    s[..end].parse().ok().map(|n| (n, &s[end..]))
}

/// Build the unsplit classifier for `spec`. Initialization consumes the RNG
/// stream layer by layer, so the same seed gives the same parameters no
/// matter where the network is later cut.
pub fn build_network(
    spec: &str,
    input_shape: &[usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<Network> {
    let tokens = parse_arch_spec(spec)?;
    let mut rng = substream(seed, "model-init", 0);
    let mut layers: Vec<Layer> = Vec::new();
    let mut shape = vec![1, input_shape[0], input_shape[1], input_shape[2]];
    let n_fc = tokens.iter().filter(|t| matches!(t, ArchToken::Fc { .. })).count();
    let mut fc_seen = 0;
    for token in &tokens {
        match *token {
            ArchToken::Conv {
                channels,
                kernel,
                stride,
            } => {
                if shape.len() != 4 {
                    return Err(Error::BadArchSpec {
                        spec: spec.into(),
                        reason: "conv after fc is not supported".into(),
                    });
                }
                let conv = Conv2d::kaiming(shape[1], channels, kernel, stride, kernel / 2, &mut rng);
                shape = conv.output_shape(&shape)?;
                layers.push(Layer::Conv2d(conv));
                layers.push(Layer::Relu(Relu::new()));
            }
            ArchToken::Pool => {
                let pool = MaxPool2x2::new();
                shape = pool.output_shape(&shape)?;
                layers.push(Layer::MaxPool2x2(pool));
            }
            ArchToken::Fc { units } => {
                if shape.len() == 4 {
                    let flat = Flatten::new();
                    shape = flat.output_shape(&shape)?;
                    layers.push(Layer::Flatten(flat));
                }
                let out = units.unwrap_or(num_classes);
                let dense = Dense::kaiming(shape[1], out, &mut rng);
                shape = dense.output_shape(&shape)?;
                layers.push(Layer::Dense(dense));
                fc_seen += 1;
                if fc_seen < n_fc {
                    layers.push(Layer::Relu(Relu::new()));
                }
            }
        }
    }
    Ok(Network::from_layers(layers))
}

/// Bottleneck layer pair configuration, `Cx-Sy` in reports: `l_in` compresses
/// to `channels` with the given stride, `l_out` restores the original channel
/// count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckConfig {
    pub channels: usize,
    pub stride: usize,
}

impl fmt::Display for BottleneckConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}-S{}", self.channels, self.stride)
    }
}

/// A classifier partitioned at a cut-layer into a client part and a server
/// part.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub client: Network,
    pub server: Network,
    pub cut_layer: usize,
    pub bottleneck: Option<BottleneckConfig>,
    /// [C, H, W] of a single input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub arch: String,
}

impl SplitModel {
    /// Activation shape [C, H, W] leaving the client part for one image.
    pub fn activation_shape(&self) -> Result<[usize; 3]> {
        let s = self.client.output_shape(&[
            1,
            self.input_shape[0],
            self.input_shape[1],
            self.input_shape[2],
        ])?;
        Ok([s[1], s[2], s[3]])
    }

    /// Run the whole model client-then-server without caching.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.server.predict(&self.client.predict(input)?)
    }
}

/// Split `spec` at `cut_layer` weighted layers. The client keeps every
/// trailing non-weighted layer (ReLU/pool) up to the next weighted layer, so
/// the composed forward equals the unsplit network exactly.
pub fn build_split_classifier(
    spec: &str,
    cut_layer: usize,
    input_shape: &[usize; 3],
    num_classes: usize,
    seed: u64,
) -> Result<SplitModel> {
    let full = build_network(spec, input_shape, num_classes, seed)?;
    let weighted = full.weighted_layer_count();
    if cut_layer == 0 || cut_layer >= weighted {
        return Err(Error::CutLayerOutOfRange {
            cut: cut_layer,
            weighted,
        });
    }
    let mut layers: Vec<Layer> = full
        .blocks
        .into_iter()
        .map(|b| match b {
            Block::Single(l) => l,
            Block::Residual(_) => unreachable!("classifiers are plain stacks"),
        })
        .collect();
    // Index just before the (cut_layer+1)-th weighted layer.
    let mut seen = 0;
    let mut split_at = layers.len();
    for (i, l) in layers.iter().enumerate() {
        if l.is_weighted() {
            seen += 1;
            if seen == cut_layer + 1 {
                split_at = i;
                break;
            }
        }
    }
    let server_layers = layers.split_off(split_at);
    Ok(SplitModel {
        client: Network::from_layers(layers),
        server: Network::from_layers(server_layers),
        cut_layer,
        bottleneck: None,
        input_shape: *input_shape,
        num_classes,
        arch: spec.to_string(),
    })
}

/// Append the bottleneck pair to the client part: `l_in` maps the activation
/// channels down to `cfg.channels` with kernel 3 and `cfg.stride`, `l_out`
/// maps back up with stride 1. Spatial dims are not restored for stride 2.
pub fn insert_bottleneck(model: SplitModel, cfg: BottleneckConfig, seed: u64) -> Result<SplitModel> {
    if model.bottleneck.is_some() {
        return Err(Error::BadBottleneck {
            reason: "model already has a bottleneck".into(),
        });
    }
    if !(cfg.stride == 1 || cfg.stride == 2) {
        return Err(Error::BadBottleneck {
            reason: format!("stride {} not in {{1, 2}}", cfg.stride),
        });
    }
    let act = model.activation_shape()?;
    if cfg.channels == 0 || cfg.channels > act[0] {
        return Err(Error::BadBottleneck {
            reason: format!(
                "channels {} must be in [1, {}] (client output channels)",
                cfg.channels, act[0]
            ),
        });
    }
    let mut rng = substream(seed, "bottleneck-init", 0);
    let mut model = model;
    model
        .client
        .push(Layer::Conv2d(Conv2d::kaiming(act[0], cfg.channels, 3, cfg.stride, 1, &mut rng)));
    model.client.push(Layer::Relu(Relu::new()));
    model
        .client
        .push(Layer::Conv2d(Conv2d::kaiming(cfg.channels, act[0], 3, 1, 1, &mut rng)));
    model.client.push(Layer::Relu(Relu::new()));
    model.bottleneck = Some(cfg);
    // Re-validate the server on the (possibly smaller) activation. Stride-2
    // bottlenecks shrink the spatial dims without restoring them, so the
    // server's first dense layer is resized (fresh init) to the new flatten
    // width; bottlenecks are inserted before training, so nothing is lost.
    let act = model.activation_shape()?;
    let mut shape = vec![1, act[0], act[1], act[2]];
    for block in model.server.blocks.iter_mut() {
        match block {
            Block::Single(Layer::Dense(d)) => {
                if shape.len() == 2 && shape[1] != d.in_features {
                    *d = Dense::kaiming(shape[1], d.out_features, &mut rng);
                }
                shape = d.output_shape(&shape)?;
            }
            Block::Single(l) => {
                shape = l.output_shape(&shape)?;
            }
            Block::Residual(_) => {
                return Err(Error::BadBottleneck {
                    reason: "classifier server parts are plain stacks".into(),
                })
            }
        }
    }
    Ok(model)
}

/// Inversion decoder complexity tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InversionTier {
    L0,
    L1,
    L2,
    L3,
}

impl InversionTier {
    pub const ALL: [InversionTier; 4] = [
        InversionTier::L0,
        InversionTier::L1,
        InversionTier::L2,
        InversionTier::L3,
    ];

    /// Residual conv pairs in the trunk (L0 uses two plain convs instead).
    pub fn residual_pairs(self) -> usize {
        match self {
            InversionTier::L0 => 0,
            InversionTier::L1 => 2,
            InversionTier::L2 => 4,
            InversionTier::L3 => 6,
        }
    }

    pub fn width_multiplier(self) -> usize {
        match self {
            InversionTier::L0 | InversionTier::L1 => 1,
            InversionTier::L2 => 2,
            InversionTier::L3 => 4,
        }
    }

    pub fn width(self, base_width: usize) -> usize {
        base_width * self.width_multiplier()
    }
}

impl fmt::Display for InversionTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InversionTier::L0 => "L0",
            InversionTier::L1 => "L1",
            InversionTier::L2 => "L2",
            InversionTier::L3 => "L3",
        };
        f.write_str(s)
    }
}

impl FromStr for InversionTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L0" | "l0" => Ok(InversionTier::L0),
            "L1" | "l1" => Ok(InversionTier::L1),
            "L2" | "l2" => Ok(InversionTier::L2),
            "L3" | "l3" => Ok(InversionTier::L3),
            other => Err(Error::InvalidParam(format!("unknown inversion tier `{other}`"))),
        }
    }
}

/// Build the tier decoder mapping `activation_shape` back to
/// `image_shape`, ending in a Sigmoid so outputs lie in [0,1]. Upsampling
/// uses stride-2 transposed convs (k4, p1), one per doubling.
pub fn build_inversion_model(
    tier: InversionTier,
    activation_shape: &[usize; 3],
    image_shape: &[usize; 3],
    base_width: usize,
    seed: u64,
) -> Result<Network> {
    let unreachable = |reason: &str| Error::UnreachableOutputShape {
        activation: activation_shape.to_vec(),
        image: image_shape.to_vec(),
        reason: reason.to_string(),
    };
    let (ah, aw) = (activation_shape[1], activation_shape[2]);
    let (ih, iw) = (image_shape[1], image_shape[2]);
    if ah == 0 || aw == 0 {
        return Err(unreachable("activation has empty spatial dims"));
    }
    if ih % ah != 0 || iw % aw != 0 || ih / ah != iw / aw {
        return Err(unreachable("image size is not an integer multiple of the activation size"));
    }
    let ratio = ih / ah;
    if !ratio.is_power_of_two() {
        return Err(unreachable("upsampling factor is not a power of two"));
    }
    let stages = ratio.trailing_zeros() as usize;

    let mut rng = substream(seed, "inversion-init", tier as u64);
    let width = tier.width(base_width);
    let mut blocks: Vec<Block> = Vec::new();
    blocks.push(Block::Single(Layer::Conv2d(Conv2d::kaiming(
        activation_shape[0],
        width,
        3,
        1,
        1,
        &mut rng,
    ))));
    blocks.push(Block::Single(Layer::Relu(Relu::new())));
    if tier == InversionTier::L0 {
        blocks.push(Block::Single(Layer::Conv2d(Conv2d::kaiming(
            width, width, 3, 1, 1, &mut rng,
        ))));
        blocks.push(Block::Single(Layer::Relu(Relu::new())));
    } else {
        for _ in 0..tier.residual_pairs() {
            blocks.push(Block::Residual(vec![
                Layer::Conv2d(Conv2d::kaiming(width, width, 3, 1, 1, &mut rng)),
                Layer::Relu(Relu::new()),
                Layer::Conv2d(Conv2d::kaiming(width, width, 3, 1, 1, &mut rng)),
            ]));
            blocks.push(Block::Single(Layer::Relu(Relu::new())));
        }
    }
    if stages == 0 {
        blocks.push(Block::Single(Layer::Conv2d(Conv2d::kaiming(
            width,
            image_shape[0],
            3,
            1,
            1,
            &mut rng,
        ))));
    } else {
        for _ in 0..stages - 1 {
            blocks.push(Block::Single(Layer::ConvTranspose2d(ConvTranspose2d::kaiming(
                width, width, 4, 2, 1, &mut rng,
            ))));
            blocks.push(Block::Single(Layer::Relu(Relu::new())));
        }
        blocks.push(Block::Single(Layer::ConvTranspose2d(ConvTranspose2d::kaiming(
            width,
            image_shape[0],
            4,
            2,
            1,
            &mut rng,
        ))));
    }
    blocks.push(Block::Single(Layer::Sigmoid(Sigmoid::new())));

    let net = Network::new(blocks);
    let out = net.output_shape(&[1, activation_shape[0], ah, aw])?;
    if out[1..] != image_shape[..] {
        return Err(unreachable("decoder output does not match the image shape"));
    }
    Ok(net)
}

/// Per-sample FLOPs: convs and dense count 1 MAC = 2 FLOPs, activations and
/// residual adds 1 per element, pooling and flatten 0.
pub fn count_flops(net: &Network, input_shape: &[usize]) -> Result<u64> {
    let mut shape = input_shape.to_vec();
    let mut total: u64 = 0;
    for block in &net.blocks {
        match block {
            Block::Single(l) => {
                let out = l.output_shape(&shape)?;
                total += layer_flops(l, &shape, &out);
                shape = out;
            }
            Block::Residual(layers) => {
                let mut cur = shape.clone();
                for l in layers {
                    let out = l.output_shape(&cur)?;
                    total += layer_flops(l, &cur, &out);
                    cur = out;
                }
                // Skip-connection add.
                total += per_sample_elems(&cur);
                shape = cur;
            }
        }
    }
    Ok(total)
}

fn per_sample_elems(shape: &[usize]) -> u64 {
    shape[1..].iter().product::<usize>() as u64
}

fn layer_flops(l: &Layer, input: &[usize], output: &[usize]) -> u64 {
    match l {
        Layer::Conv2d(c) => {
            2 * (c.kernel * c.kernel * c.in_channels * c.out_channels) as u64
                * (output[2] * output[3]) as u64
        }
        Layer::ConvTranspose2d(c) => {
            2 * (c.kernel * c.kernel * c.in_channels * c.out_channels) as u64
                * (input[2] * input[3]) as u64
        }
        Layer::Dense(d) => 2 * (d.in_features * d.out_features) as u64,
        Layer::Relu(_) | Layer::Sigmoid(_) => per_sample_elems(output),
        Layer::MaxPool2x2(_) | Layer::Flatten(_) => 0,
    }
}

/// Set a kernel-3 conv to the identity map (center tap 1 on the matching
/// channel); used to build bottlenecks that provably preserve activations.
pub fn set_identity_kernel(conv: &mut Conv2d) {
    assert_eq!(conv.in_channels, conv.out_channels);
    assert_eq!(conv.stride, 1);
    let k = conv.kernel;
    let c = conv.in_channels;
    let center = k / 2;
    let mut w = vec![0.0; c * c * k * k];
    for ch in 0..c {
        w[((ch * c + ch) * k + center) * k + center] = 1.0;
    }
    conv.weight = Tensor::from_vec(vec![c, c, k, k], w);
    conv.bias = Tensor::zeros(vec![c]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_accepts_shorthand_and_rejects_junk() {
        let t = parse_arch_spec("conv8-conv16k5s2-pool-fc10").unwrap();
        assert_eq!(
            t,
            vec![
                ArchToken::Conv { channels: 8, kernel: 3, stride: 1 },
                ArchToken::Conv { channels: 16, kernel: 5, stride: 2 },
                ArchToken::Pool,
                ArchToken::Fc { units: Some(10) },
            ]
        );
        assert!(parse_arch_spec("conv").is_err());
        assert!(parse_arch_spec("dense8").is_err());
        assert!(parse_arch_spec("conv8x2").is_err());
        assert!(parse_arch_spec("").is_err());
    }

    #[test]
    fn split_partitions_by_weighted_layer() {
        let m = build_split_classifier("conv8-conv16-conv32-fc", 2, &[1, 8, 8], 4, 7).unwrap();
        assert_eq!(m.client.weighted_layer_count(), 2);
        assert_eq!(m.server.weighted_layer_count(), 2); // conv32 + fc
        assert_eq!(m.activation_shape().unwrap(), [16, 8, 8]);
    }

    #[test]
    fn cut_zero_and_cut_too_deep_error() {
        for cut in [0, 4, 9] {
            assert!(matches!(
                build_split_classifier("conv8-conv16-conv32-fc", cut, &[1, 8, 8], 4, 7),
                Err(Error::CutLayerOutOfRange { .. })
            ));
        }
    }

    #[test]
    fn client_keeps_trailing_pool() {
        let m = build_split_classifier(DESK_ARCH, 2, &[1, 28, 28], 10, 3).unwrap();
        assert_eq!(m.activation_shape().unwrap(), [16, 7, 7]);
        let batch = Tensor::zeros(vec![4, 1, 28, 28]);
        let act = m.client.predict(&batch).unwrap();
        assert_eq!(act.shape(), &[4, 16, 7, 7]);
    }

    #[test]
    fn different_cuts_share_initialization() {
        // Composition oracle: the split model must equal the unsplit network.
        let x = crate::testing::well_conditioned_input(vec![2, 1, 8, 8], 5);
        let full = build_network(DESK_ARCH, &[1, 8, 8], 4, 42).unwrap();
        let want = full.predict(&x).unwrap();
        for cut in [1, 2] {
            let m = build_split_classifier(DESK_ARCH, cut, &[1, 8, 8], 4, 42).unwrap();
            let got = m.predict(&x).unwrap();
            assert_eq!(got.data(), want.data(), "cut {cut}");
        }
    }

    #[test]
    fn bottleneck_restores_channels_and_validates() {
        let m = build_split_classifier("conv8-conv16-conv32-fc", 2, &[1, 8, 8], 4, 7).unwrap();
        let m = insert_bottleneck(m, BottleneckConfig { channels: 8, stride: 1 }, 7).unwrap();
        assert_eq!(m.activation_shape().unwrap(), [16, 8, 8]);
        // Double insertion is rejected.
        assert!(insert_bottleneck(m, BottleneckConfig { channels: 4, stride: 1 }, 7).is_err());
    }

    #[test]
    fn bottleneck_stride_two_halves_spatial() {
        let m = build_split_classifier("conv8-conv16-conv32-fc", 2, &[1, 8, 8], 4, 7).unwrap();
        let m = insert_bottleneck(m, BottleneckConfig { channels: 8, stride: 2 }, 7).unwrap();
        assert_eq!(m.activation_shape().unwrap(), [16, 4, 4]);
    }

    #[test]
    fn bottleneck_rejects_too_many_channels() {
        let m = build_split_classifier("conv8-conv16-conv32-fc", 2, &[1, 8, 8], 4, 7).unwrap();
        assert!(matches!(
            insert_bottleneck(m, BottleneckConfig { channels: 17, stride: 1 }, 7),
            Err(Error::BadBottleneck { .. })
        ));
    }

    #[test]
    fn identity_bottleneck_preserves_output() {
        let m = build_split_classifier("conv8-conv16-conv32-fc", 2, &[1, 8, 8], 4, 11).unwrap();
        let x = crate::testing::well_conditioned_input(vec![2, 1, 8, 8], 6);
        let want = m.predict(&x).unwrap();
        let mut m = insert_bottleneck(m, BottleneckConfig { channels: 16, stride: 1 }, 11).unwrap();
        // Overwrite both bottleneck convs with identity kernels.
        let n = m.client.blocks.len();
        for idx in [n - 4, n - 2] {
            match &mut m.client.blocks[idx] {
                Block::Single(Layer::Conv2d(c)) => set_identity_kernel(c),
                other => panic!("expected conv at block {idx}, got {other:?}"),
            }
        }
        let got = m.predict(&x).unwrap();
        for (a, b) in got.data().iter().zip(want.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l0_decoder_matches_paper_shape_recipe() {
        // [16,8,8] -> [1,16,16] via 2 convs + 1 stride-2 transpose.
        let net = build_inversion_model(InversionTier::L0, &[16, 8, 8], &[1, 16, 16], 16, 3).unwrap();
        let convs = net
            .blocks
            .iter()
            .filter(|b| matches!(b, Block::Single(Layer::Conv2d(_))))
            .count();
        let transposes = net
            .blocks
            .iter()
            .filter(|b| matches!(b, Block::Single(Layer::ConvTranspose2d(_))))
            .count();
        assert_eq!((convs, transposes), (2, 1));
        assert!(matches!(net.blocks.last(), Some(Block::Single(Layer::Sigmoid(_)))));
        let y = net.predict(&Tensor::zeros(vec![2, 16, 8, 8])).unwrap();
        assert_eq!(y.shape(), &[2, 1, 16, 16]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn l3_structure_from_base_width() {
        let net = build_inversion_model(InversionTier::L3, &[16, 4, 4], &[1, 8, 8], 8, 3).unwrap();
        let pairs = net
            .blocks
            .iter()
            .filter(|b| matches!(b, Block::Residual(_)))
            .count();
        assert_eq!(pairs, 6);
        assert_eq!(InversionTier::L3.width(8), 32);
    }

    #[test]
    fn unreachable_shapes_are_rejected() {
        // Non-integer ratio.
        assert!(build_inversion_model(InversionTier::L0, &[16, 3, 3], &[1, 8, 8], 8, 3).is_err());
        // Non-power-of-two ratio.
        assert!(build_inversion_model(InversionTier::L0, &[16, 2, 2], &[1, 6, 6], 8, 3).is_err());
        // Downsampling.
        assert!(build_inversion_model(InversionTier::L0, &[16, 8, 8], &[1, 4, 4], 8, 3).is_err());
        // Same size is fine (plain conv head).
        assert!(build_inversion_model(InversionTier::L0, &[16, 8, 8], &[1, 8, 8], 8, 3).is_ok());
    }

    #[test]
    fn flop_formulas() {
        let dense = Network::from_layers(vec![Layer::Dense(Dense::kaiming(
            10,
            5,
            &mut substream(0, "t", 0),
        ))]);
        assert_eq!(count_flops(&dense, &[1, 10]).unwrap(), 100);

        let conv = Network::from_layers(vec![Layer::Conv2d(Conv2d::kaiming(
            1,
            1,
            3,
            1,
            1,
            &mut substream(0, "t", 1),
        ))]);
        assert_eq!(count_flops(&conv, &[1, 1, 4, 4]).unwrap(), 288);

        let empty = Network::default();
        assert_eq!(count_flops(&empty, &[1, 3, 4, 4]).unwrap(), 0);
    }

    #[test]
    fn tier_flops_strictly_increase() {
        for (c, h) in [(8usize, 4usize), (16, 8), (32, 2), (3, 16)] {
            let act = [c, h, h];
            let img = [1, h * 2, h * 2];
            let mut prev = 0u64;
            for tier in InversionTier::ALL {
                let net = build_inversion_model(tier, &act, &img, 8, 1).unwrap();
                let f = count_flops(&net, &[1, c, h, h]).unwrap();
                assert!(f > prev, "{tier} not above previous at act {act:?}");
                prev = f;
            }
        }
    }
}
