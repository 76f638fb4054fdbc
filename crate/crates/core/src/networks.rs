//! Generator and PatchGAN discriminators.
//!
//! Layer strings follow the usual image-translation shorthand:
//! `c7s1-k` 7x7 stride-1 convolution + ReLU, `dk` 3x3 stride-2 convolution +
//! instance norm + ReLU, `Rk` pre-activation residual block, `uk` 3x3
//! stride-2 transposed convolution + instance norm + ReLU; `cn-k`, `ck` and
//! `cns1-k` are 4x4 discriminator convolutions (without norm, with norm,
//! stride 1) followed by LeakyReLU(0.2).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svbrdf_tensor::{
    BoundParams, Conv2dSpec, ConvTranspose2dSpec, Element, Graph, PadMode, Padding, ParamId, ParamSet, Tensor,
    Var, INIT_STD, INSTANCE_NORM_EPS,
};

use crate::error::{invalid, Error, Result};
use crate::maps::PARAM_CHANNELS;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const RESIDUAL_BLOCKS: usize = 9;
/// Number of discriminator layers whose activations feed feature matching.
pub const FEATURE_LAYERS: usize = 4;
/// Input channels of a discriminator: image plus parameter maps.
pub const DISC_CHANNELS: usize = 3 + PARAM_CHANNELS;
/// Offset keeping the normal's z component away from zero before normalization.
pub const NORMAL_Z_OFFSET: f64 = 0.01;

/// `round(k * scale)`, at least one channel.
pub fn scaled_channels(k: usize, scale: f64) -> usize {
    ((k as f64 * scale).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Act {
    Identity,
    Relu,
    Leaky,
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Conv(Conv2dSpec),
    Transpose(ConvTranspose2dSpec),
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<(ParamId, ParamId)>,
    kind: Kind,
    act: Act,
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: (ParamId, ParamId),
    conv1: ParamId,
    norm2: (ParamId, ParamId),
    conv2: ParamId,
    bias2: ParamId,
}

struct Builder<'a, T: Element, R: Rng> {
    params: ParamSet<T>,
    rng: &'a mut R,
}

impl<T: Element, R: Rng> Builder<'_, T, R> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.add_normal(format!("{name}.weight"), shape, INIT_STD, self.rng)
    }

    fn bias(&mut self, name: &str, c: usize) -> ParamId {
        self.params.add(format!("{name}.bias"), Tensor::zeros(&[c]))
    }

    fn norm(&mut self, name: &str, c: usize) -> (ParamId, ParamId) {
        let g = self.params.add(format!("{name}.norm.gamma"), Tensor::full(&[c], T::one()));
        let b = self.params.add(format!("{name}.norm.beta"), Tensor::zeros(&[c]));
        (g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        norm: bool,
        act: Act,
    ) -> ConvLayer {
        ConvLayer {
            weight: self.weight(name, &[cout, cin, k, k]),
            bias: bias.then(|| self.bias(name, cout)),
            norm: norm.then(|| self.norm(name, cout)),
            kind: Kind::Conv(spec),
            act,
        }
    }
}

fn apply_layer<T: Element>(g: &mut Graph<T>, p: &BoundParams, layer: &ConvLayer, x: Var) -> Result<Var> {
    let w = p.var(layer.weight);
    let b = layer.bias.map(|b| p.var(b));
    let mut y = match layer.kind {
        Kind::Conv(spec) => g.conv2d(x, w, b, spec)?,
        Kind::Transpose(spec) => g.conv_transpose2d(x, w, b, spec)?,
    };
    if let Some((gamma, beta)) = layer.norm {
        y = g.instance_norm(y, p.var(gamma), p.var(beta), INSTANCE_NORM_EPS)?;
    }
    Ok(match layer.act {
        Act::Identity => y,
        Act::Relu => g.relu(y),
        Act::Leaky => g.leaky_relu(y, LEAKY_SLOPE),
    })
}

/// Image-to-parameters network: `c7s1-64, d128, d256, d512, 9x R512, u256,
/// u128, u64, c7s1-8`, every width multiplied by `width_scale` except the
/// eight output channels.
#[derive(Clone, Debug)]
pub struct Generator<T: Element> {
    params: ParamSet<T>,
    width_scale: f64,
    encoder: Vec<ConvLayer>,
    blocks: Vec<ResBlock>,
    decoder: Vec<ConvLayer>,
}

impl<T: Element> Generator<T> {
    pub fn new(width_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(width_scale > 0.0 && width_scale.is_finite()) {
            return Err(invalid(format!("width scale must be positive, got {width_scale}")));
        }
        let ch = |k| scaled_channels(k, width_scale);
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let reflect = |p| Padding::reflect(p);
        let down = Conv2dSpec::new(2, Padding::zero(1));
        let encoder = vec![
            b.conv("c7s1_64", 3, ch(64), 7, Conv2dSpec::new(1, reflect(3)), true, false, Act::Relu),
            b.conv("d128", ch(64), ch(128), 3, down, false, true, Act::Relu),
            b.conv("d256", ch(128), ch(256), 3, down, false, true, Act::Relu),
            b.conv("d512", ch(256), ch(512), 3, down, false, true, Act::Relu),
        ];
        let c = ch(512);
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|i| {
                let name = format!("r512_{i}");
                ResBlock {
                    norm1: b.norm(&format!("{name}.a"), c),
                    conv1: b.weight(&format!("{name}.a"), &[c, c, 3, 3]),
                    norm2: b.norm(&format!("{name}.b"), c),
                    conv2: b.weight(&format!("{name}.b"), &[c, c, 3, 3]),
                    bias2: b.bias(&format!("{name}.b"), c),
                }
            })
            .collect();
        let mut up = |name: &str, cin: usize, cout: usize| ConvLayer {
            // transposed weights are [cin, cout, k, k]
            weight: b.weight(name, &[cin, cout, 3, 3]),
            bias: None,
            norm: Some(b.norm(name, cout)),
            kind: Kind::Transpose(ConvTranspose2dSpec::UPSAMPLE2),
            act: Act::Relu,
        };
        let mut decoder = vec![
            up("u256", ch(512), ch(256)),
            up("u128", ch(256), ch(128)),
            up("u64", ch(128), ch(64)),
        ];
        decoder.push(b.conv(
            "c7s1_8",
            ch(64),
            PARAM_CHANNELS,
            7,
            Conv2dSpec::new(1, reflect(3)),
            true,
            false,
            Act::Identity,
        ));
        Ok(Self {
            params: b.params,
            width_scale,
            encoder,
            blocks,
            decoder,
        })
    }

    /// Rebuild around stored weights; the width is read from the first layer.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let first = params
            .find("c7s1_64.weight")
            .ok_or_else(|| invalid("checkpoint has no c7s1_64.weight; not a generator"))?;
        let c1 = params.get(first).shape()[0];
        let mut net = Self::new(c1 as f64 / 64.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn width_scale(&self) -> f64 {
        self.width_scale
    }

    /// Raw 8-channel output of the last convolution.
    pub fn forward_raw(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4("generator")?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("generator expects 3 input channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(invalid(format!("generator input {h}x{w} must be divisible by 8")));
        }
        let mut y = x;
        for layer in &self.encoder {
            y = apply_layer(g, p, layer, y)?;
        }
        let pad = Conv2dSpec::new(1, Padding::reflect(1));
        for blk in &self.blocks {
            let mut t = g.instance_norm(y, p.var(blk.norm1.0), p.var(blk.norm1.1), INSTANCE_NORM_EPS)?;
            t = g.relu(t);
            t = g.conv2d(t, p.var(blk.conv1), None, pad)?;
            t = g.instance_norm(t, p.var(blk.norm2.0), p.var(blk.norm2.1), INSTANCE_NORM_EPS)?;
            t = g.relu(t);
            t = g.conv2d(t, p.var(blk.conv2), Some(p.var(blk.bias2)), pad)?;
            y = g.add(y, t)?;
        }
        for layer in &self.decoder {
            y = apply_layer(g, p, layer, y)?;
        }
        Ok(y)
    }

    /// Parameter maps `[B, 8, H, W]` with the output head applied.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let raw = self.forward_raw(g, p, x)?;
        output_head(g, raw)
    }
}

/// Base color, roughness and metallic through a sigmoid; the normal is
/// `normalize(2 s_x - 1, 2 s_y - 1, s_z + 0.01)` with `s = sigmoid(raw)`.
pub fn output_head<T: Element>(g: &mut Graph<T>, raw: Var) -> Result<Var> {
    let s = g.sigmoid(raw);
    let base = g.slice_channels(s, 0, 3)?;
    let nxy = g.slice_channels(s, 3, 2)?;
    let nxy = g.scale(nxy, 2.0);
    let nxy = g.add_scalar(nxy, -1.0);
    let nz = g.slice_channels(s, 5, 1)?;
    let nz = g.add_scalar(nz, NORMAL_Z_OFFSET);
    let n = g.concat_channels(&[nxy, nz])?;
    let n = g.normalize_channels(n)?;
    let rm = g.slice_channels(s, 6, 2)?;
    Ok(g.concat_channels(&[base, n, rm])?)
}

/// Scores and the activations of the first [`FEATURE_LAYERS`] layers.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// PatchGAN discriminator `cn-64, c128, c256, c512, cns1-1`.
#[derive(Clone, Debug)]
pub struct Discriminator<T: Element> {
    params: ParamSet<T>,
    layers: Vec<ConvLayer>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(width_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(width_scale > 0.0 && width_scale.is_finite()) {
            return Err(invalid(format!("width scale must be positive, got {width_scale}")));
        }
        let ch = |k| scaled_channels(k, width_scale);
        let mut b = Builder {
            params: ParamSet::new(),
            rng,
        };
        let s2 = Conv2dSpec::new(2, Padding::zero(1));
        let s1 = Conv2dSpec::new(1, Padding::same_even(4, PadMode::Zero));
        let layers = vec![
            b.conv("cn64", DISC_CHANNELS, ch(64), 4, s2, true, false, Act::Leaky),
            b.conv("c128", ch(64), ch(128), 4, s2, false, true, Act::Leaky),
            b.conv("c256", ch(128), ch(256), 4, s2, false, true, Act::Leaky),
            b.conv("c512", ch(256), ch(512), 4, s2, false, true, Act::Leaky),
            b.conv("cns1_1", ch(512), 1, 4, s1, true, false, Act::Leaky),
        ];
        Ok(Self {
            params: b.params,
            layers,
        })
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let first = params
            .find("cn64.weight")
            .ok_or_else(|| invalid("checkpoint has no cn64.weight; not a discriminator"))?;
        let c1 = params.get(first).shape()[0];
        let mut net = Self::new(c1 as f64 / 64.0, &mut ChaCha8Rng::seed_from_u64(0))?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<DiscOutput> {
        let (_, c, h, w) = g.value(x).dims4("discriminator")?;
        if c != DISC_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {DISC_CHANNELS} channels, got {c}"
            )));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(invalid(format!("discriminator input {h}x{w} must be divisible by 16")));
        }
        let mut features = Vec::with_capacity(FEATURE_LAYERS);
        let mut y = x;
        for (i, layer) in self.layers.iter().enumerate() {
            y = apply_layer(g, p, layer, y)?;
            if i < FEATURE_LAYERS {
                features.push(y);
            }
        }
        Ok(DiscOutput { score: y, features })
    }
}

/// Full-resolution and half-resolution discriminators of identical architecture.
#[derive(Clone, Debug)]
pub struct Discriminators<T: Element> {
    pub d1: Discriminator<T>,
    pub d2: Discriminator<T>,
}

impl<T: Element> Discriminators<T> {
    pub fn new(width_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            d1: Discriminator::new(width_scale, rng)?,
            d2: Discriminator::new(width_scale, rng)?,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> [BoundParams; 2] {
        [self.d1.params().bind(g, requires_grad), self.d2.params().bind(g, requires_grad)]
    }

    /// Condition on `image` by channel concatenation and run both scales.
    pub fn discriminate(
        &self,
        g: &mut Graph<T>,
        bound: &[BoundParams; 2],
        image: Var,
        params: Var,
    ) -> Result<[DiscOutput; 2]> {
        let (bi, _, hi, wi) = g.value(image).dims4("discriminate")?;
        let (bp, _, hp, wp) = g.value(params).dims4("discriminate")?;
        if (bi, hi, wi) != (bp, hp, wp) {
            return Err(Error::ShapeMismatch(format!(
                "image {:?} vs parameters {:?}",
                g.value(image).shape(),
                g.value(params).shape()
            )));
        }
        let x = g.concat_channels(&[image, params])?;
        let half = g.resize_half(x)?;
        Ok([self.d1.forward(g, &bound[0], x)?, self.d2.forward(g, &bound[1], half)?])
    }
}
