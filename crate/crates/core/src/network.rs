//! Deep image prior networks: a plain U-net and a gated U-net.
//!
//! Both map a two-channel input `[c ⊙ f + (1 - c) ⊙ init, c]` to a
//! single-channel image in `(0, 1)`. With `S` scales and `C_s = base · 2^s`
//! channels at scale `s`, the layers are
//!
//! ```text
//! enc0   conv 2 -> C0, then (n - 1) convs C0 -> C0
//! enc s  stride-2 conv C(s-1) -> Cs, then n convs Cs -> Cs      (s >= 1)
//! dec s  nearest x2 + conv C(s+1) -> Cs, concat skip,
//!        conv 2Cs -> Cs, then (n - 1) convs Cs -> Cs             (s < S-1)
//! head   1x1 conv C0 -> 1, sigmoid
//! ```
//!
//! Every layer but the head is followed by a leaky ReLU (slope 0.2). The
//! gated variant replaces each such layer with
//! `leaky(conv_f(x)) ⊙ sigmoid(conv_g(x))` and dilates the convolutions of
//! the coarsest encoder scale.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const MAX_BASE_CHANNELS: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Unet,
    GatedUnet,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Unet => "unet",
            Variant::GatedUnet => "gated-unet",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::Unet),
            "gated-unet" => Ok(Variant::GatedUnet),
            other => Err(Error::InvalidArgument(format!(
                "unknown network variant {other:?}; expected unet or gated-unet"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub scales: usize,
    pub convs_per_scale: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    /// Dilation of each conv on the coarsest encoder scale (gated only).
    pub coarse_dilations: Vec<usize>,
}

impl NetworkSpec {
    pub fn unet(scales: usize, base_channels: usize) -> Self {
        NetworkSpec {
            variant: Variant::Unet,
            scales,
            convs_per_scale: 2,
            base_channels,
            kernel_size: 3,
            coarse_dilations: Vec::new(),
        }
    }

    pub fn gated_unet(scales: usize, base_channels: usize) -> Self {
        NetworkSpec {
            variant: Variant::GatedUnet,
            coarse_dilations: vec![2, 4],
            ..Self::unet(scales, base_channels)
        }
    }

    /// Three scales up to 128 pixels on the short side, four beyond.
    pub fn default_scales(height: usize, width: usize) -> usize {
        if height.min(width) <= 128 {
            3
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(format!("network: {msg}")));
        if !(1..=5).contains(&self.scales) {
            return fail(format!("scales must lie in 1..=5, got {}", self.scales));
        }
        if !(1..=4).contains(&self.convs_per_scale) {
            return fail(format!(
                "convs per scale must lie in 1..=4, got {}",
                self.convs_per_scale
            ));
        }
        if !(1..=MAX_BASE_CHANNELS).contains(&self.base_channels) {
            return fail(format!(
                "base channels must lie in 1..={MAX_BASE_CHANNELS}, got {}",
                self.base_channels
            ));
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        match self.variant {
            Variant::Unet if !self.coarse_dilations.is_empty() => {
                fail("dilations are only used by the gated variant".into())
            }
            Variant::GatedUnet if self.coarse_dilations.len() != self.convs_per_scale => fail(format!(
                "expected {} coarse dilations, got {}",
                self.convs_per_scale,
                self.coarse_dilations.len()
            )),
            _ if self.coarse_dilations.contains(&0) => fail("dilations must be positive".into()),
            _ => Ok(()),
        }
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }

    /// Spatial dims must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1 << (self.scales - 1)
    }

    fn coarse_dilation(&self, conv: usize) -> usize {
        self.coarse_dilations.get(conv).copied().unwrap_or(1)
    }

    /// Layer list in parameter order.
    fn layers(&self) -> Vec<Layer> {
        let gated = self.variant == Variant::GatedUnet;
        let k = self.kernel_size;
        let layer = |name: String, cin, cout, stride, dilation| Layer {
            name,
            cin,
            cout,
            kernel: k,
            stride,
            dilation,
            gated,
        };
        let last = self.scales - 1;
        let mut out = Vec::new();
        for s in 0..self.scales {
            let c = self.channels(s);
            let dil = |i| if s == last && s > 0 { self.coarse_dilation(i) } else { 1 };
            if s == 0 {
                out.push(layer("enc0.conv0".into(), 2, c, 1, 1));
                for i in 1..self.convs_per_scale {
                    out.push(layer(format!("enc0.conv{i}"), c, c, 1, 1));
                }
            } else {
                out.push(layer(format!("enc{s}.down"), self.channels(s - 1), c, 2, 1));
                for i in 0..self.convs_per_scale {
                    out.push(layer(format!("enc{s}.conv{i}"), c, c, 1, dil(i)));
                }
            }
        }
        for s in (0..last).rev() {
            let c = self.channels(s);
            out.push(layer(format!("dec{s}.up"), self.channels(s + 1), c, 1, 1));
            out.push(layer(format!("dec{s}.conv0"), 2 * c, c, 1, 1));
            for i in 1..self.convs_per_scale {
                out.push(layer(format!("dec{s}.conv{i}"), c, c, 1, 1));
            }
        }
        out.push(Layer {
            name: "head".into(),
            cin: self.channels(0),
            cout: 1,
            kernel: 1,
            stride: 1,
            dilation: 1,
            gated: false,
        });
        out
    }

    /// Receptive field, in input pixels, of one feature at the end of the
    /// coarsest encoder scale.
    pub fn coarsest_receptive_field(&self) -> usize {
        let layers = self.layers();
        let encoder = layers.iter().take_while(|l| l.name.starts_with("enc"));
        let (mut field, mut jump) = (1, 1);
        for l in encoder {
            field += (l.kernel - 1) * l.dilation * jump;
            jump *= l.stride;
        }
        field
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(Layer::parameter_count).sum()
    }
}

#[derive(Clone, Debug)]
struct Layer {
    name: String,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    gated: bool,
}

impl Layer {
    fn branches(&self) -> usize {
        if self.gated {
            2
        } else {
            1
        }
    }

    fn parameter_count(&self) -> usize {
        self.branches() * (self.cout * self.cin * self.kernel * self.kernel + self.cout)
    }

    fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel, self.kernel]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// A network architecture together with its weights `θ`.
#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Network<T> {
    /// Fresh weights: uniform He initialisation for leaky ReLU from `seed`,
    /// zero biases.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = Vec::new();
        for layer in &layers {
            let fan_in = (layer.cin * layer.kernel * layer.kernel) as f64;
            let bound = gain * (3.0 / fan_in).sqrt();
            for prefix in param_prefixes(layer) {
                let shape = layer.weight_shape();
                let weight = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
                params.push(NamedTensor {
                    name: format!("{prefix}.weight"),
                    value: weight,
                });
                params.push(NamedTensor {
                    name: format!("{prefix}.bias"),
                    value: Tensor::zeros(vec![layer.cout]),
                });
            }
        }
        Ok(Network { spec, layers, params })
    }

    /// Reassembles a network from stored weights, checking names and shapes.
    pub fn from_parameters(spec: NetworkSpec, params: Vec<NamedTensor<T>>) -> Result<Self> {
        spec.validate()?;
        let template = Network::<T>::build(spec.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "network expects {} parameter arrays, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&params) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    want.name,
                    want.value.shape(),
                    got.name,
                    got.value.shape()
                )));
            }
        }
        Ok(Network {
            spec,
            layers: template.layers,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every weight on `tape` as a trainable leaf, in parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Runs the network on `input: [2, H, W]`, returning `[1, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        self.forward_impl(tape, params, input, None)
    }

    /// Feature maps at the end of each encoder scale, finest first.
    pub fn encode(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Vec<Var>> {
        self.check_input(tape, params, input)?;
        let mut cursor = Cursor::new(&self.layers, params);
        self.encode_with(tape, &mut cursor, input)
    }

    fn check_input(&self, tape: &Tape<T>, params: &[Var], input: Var) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let (c, h, w) = tape.value(input).chw()?;
        if c != 2 {
            return Err(Error::InvalidShape {
                op: "network",
                detail: format!("input must have 2 channels (masked image, mask), got {c}"),
            });
        }
        let m = self.spec.required_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "network",
                detail: format!("spatial dims {h}x{w} must be positive multiples of {m}"),
            });
        }
        Ok(())
    }

    fn encode_with(&self, tape: &mut Tape<T>, cursor: &mut Cursor<'_>, input: Var) -> Result<Vec<Var>> {
        let mut x = input;
        let mut features = Vec::with_capacity(self.spec.scales);
        for s in 0..self.spec.scales {
            let count = if s == 0 {
                self.spec.convs_per_scale
            } else {
                self.spec.convs_per_scale + 1
            };
            for _ in 0..count {
                x = cursor.apply(tape, x)?;
            }
            features.push(x);
        }
        Ok(features)
    }

    /// `drop_skip` replaces the skip connection of one decoder scale by zeros.
    fn forward_impl(&self, tape: &mut Tape<T>, params: &[Var], input: Var, drop_skip: Option<usize>) -> Result<Var> {
        self.check_input(tape, params, input)?;
        let mut cursor = Cursor::new(&self.layers, params);
        let features = self.encode_with(tape, &mut cursor, input)?;
        let mut x = *features.last().expect("at least one scale");
        for s in (0..self.spec.scales - 1).rev() {
            let up = tape.upsample_nearest2(x)?;
            let up = cursor.apply(tape, up)?;
            let skip = if drop_skip == Some(s) {
                let zeros = Tensor::zeros(tape.shape(features[s]).to_vec());
                tape.constant(zeros)
            } else {
                features[s]
            };
            x = tape.concat(up, skip)?;
            for _ in 0..self.spec.convs_per_scale {
                x = cursor.apply(tape, x)?;
            }
        }
        let logits = cursor.apply(tape, x)?;
        debug_assert!(cursor.is_done());
        Ok(tape.sigmoid(logits))
    }
}

fn param_prefixes(layer: &Layer) -> Vec<String> {
    if layer.gated {
        vec![format!("{}.feature", layer.name), format!("{}.gate", layer.name)]
    } else {
        vec![layer.name.clone()]
    }
}

/// Walks the layer list alongside the bound parameters during a forward pass.
struct Cursor<'a> {
    layers: std::slice::Iter<'a, Layer>,
    params: std::slice::Iter<'a, Var>,
}

impl<'a> Cursor<'a> {
    fn new(layers: &'a [Layer], params: &'a [Var]) -> Self {
        Cursor {
            layers: layers.iter(),
            params: params.iter(),
        }
    }

    fn is_done(&self) -> bool {
        self.layers.len() == 0 && self.params.len() == 0
    }

    fn conv<T: Scalar>(&mut self, tape: &mut Tape<T>, layer: &Layer, x: Var) -> Result<Var> {
        let w = *self.params.next().expect("parameter per weight");
        let b = *self.params.next().expect("parameter per bias");
        tape.conv2d(x, w, Some(b), layer.stride, layer.dilation)
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let layer = self.layers.next().expect("layer list matches the forward pass");
        let y = self.conv(tape, layer, x)?;
        if layer.name == "head" {
            return Ok(y);
        }
        let features = tape.leaky_relu(y, LEAKY_SLOPE);
        if !layer.gated {
            return Ok(features);
        }
        let g = self.conv(tape, layer, x)?;
        let gate = tape.sigmoid(g);
        tape.mul(features, gate)
    }
}
