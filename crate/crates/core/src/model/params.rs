use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::TAPS;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::schema::{EROSION_CLASSES, NARROWING_CLASSES, NUM_SEG_CLASSES};

/// Input channels: intensity plus normalized x and y coordinates.
pub const INPUT_CHANNELS: usize = 3;

pub const HEAD_CLASSES: [usize; 3] = [NUM_SEG_CLASSES, NARROWING_CLASSES, EROSION_CLASSES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub norm_groups: usize,
    pub head_classes: [usize; 3],
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 3,
            base_channels: 8,
            in_h: 64,
            in_w: 64,
            norm_groups: 4,
            head_classes: HEAD_CLASSES,
        }
    }
}

impl NetworkConfig {
    /// Full-resolution configuration matching the original input size.
    pub fn full_scale() -> Self {
        NetworkConfig {
            depth: 5,
            base_channels: 32,
            in_h: 864,
            in_w: 928,
            ..NetworkConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels < 2 {
            return bad("base_channels must be at least 2".into());
        }
        if self.norm_groups < 1 {
            return bad("norm_groups must be at least 1".into());
        }
        let unit = 1usize << self.depth;
        if self.in_h == 0 || self.in_w == 0 || !self.in_h.is_multiple_of(unit) || !self.in_w.is_multiple_of(unit) {
            return bad(format!(
                "input {}x{} must be a non-zero multiple of 2^depth = {unit}",
                self.in_h, self.in_w
            ));
        }
        if self.head_classes != HEAD_CLASSES {
            return bad(format!("head_classes must be {HEAD_CLASSES:?}"));
        }
        Ok(())
    }

    /// Channel width of encoder level `level` (`level == depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Normalization groups for a `channels`-wide layer: the largest divisor
    /// of `channels` not exceeding `norm_groups`.
    pub fn groups_for(&self, channels: usize) -> usize {
        (1..=self.norm_groups.min(channels))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LayerKind {
    /// 3x3 convolution + group norm + ReLU.
    Conv { stride: usize },
    /// Stride-2 3x3 transposed convolution + group norm + ReLU.
    UpConv,
    /// 1x1 output convolution.
    Head,
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    /// Index into the parameter tensor list of this layer's weight; bias,
    /// norm scale and norm shift follow it.
    pub first_param: usize,
}

impl Layer {
    pub fn normalized(&self) -> bool {
        self.kind != LayerKind::Head
    }
}

/// Layer list of the U-Net in traversal order.
///
/// For each encoder level `i`: `enc{i}.conv1`, `enc{i}.conv2` (the skip
/// source), `enc{i}.down` (stride 2). Then `mid.conv1`, `mid.conv2` at
/// `base * 2^depth` channels. For each decoder level from deepest to
/// shallowest: `dec{i}.up` (transposed), `dec{i}.conv1` over the
/// concatenation `[up, skip]`, `dec{i}.conv2`. Finally the three heads.
#[derive(Debug, Clone)]
pub(crate) struct Architecture {
    pub layers: Vec<Layer>,
    pub specs: Vec<ParamSpec>,
}

impl Architecture {
    pub fn new(cfg: &NetworkConfig) -> Self {
        let mut arch = Architecture {
            layers: Vec::new(),
            specs: Vec::new(),
        };
        let mut cin = INPUT_CHANNELS;
        for i in 0..cfg.depth {
            let c = cfg.channels(i);
            arch.push(format!("enc{i}.conv1"), LayerKind::Conv { stride: 1 }, cin, c);
            arch.push(format!("enc{i}.conv2"), LayerKind::Conv { stride: 1 }, c, c);
            arch.push(format!("enc{i}.down"), LayerKind::Conv { stride: 2 }, c, c);
            cin = c;
        }
        let cm = cfg.channels(cfg.depth);
        arch.push("mid.conv1".into(), LayerKind::Conv { stride: 1 }, cin, cm);
        arch.push("mid.conv2".into(), LayerKind::Conv { stride: 1 }, cm, cm);
        let mut cin = cm;
        for i in (0..cfg.depth).rev() {
            let c = cfg.channels(i);
            arch.push(format!("dec{i}.up"), LayerKind::UpConv, cin, c);
            arch.push(format!("dec{i}.conv1"), LayerKind::Conv { stride: 1 }, 2 * c, c);
            arch.push(format!("dec{i}.conv2"), LayerKind::Conv { stride: 1 }, c, c);
            cin = c;
        }
        for (name, classes) in ["head.seg", "head.narrowing", "head.erosion"].into_iter().zip(cfg.head_classes) {
            arch.push(name.into(), LayerKind::Head, cin, classes);
        }
        arch
    }

    fn push(&mut self, name: String, kind: LayerKind, cin: usize, cout: usize) {
        let first_param = self.specs.len();
        let weight_shape = match kind {
            LayerKind::Conv { .. } => vec![cout, cin, 3, 3],
            LayerKind::UpConv => vec![cin, cout, 3, 3],
            LayerKind::Head => vec![cout, cin],
        };
        let fan_in = match kind {
            LayerKind::Head => cin,
            _ => cin * TAPS,
        };
        self.add_spec(format!("{name}.weight"), weight_shape, ParamRole::Weight { fan_in, head: kind == LayerKind::Head });
        self.add_spec(format!("{name}.bias"), vec![cout], ParamRole::Bias);
        if kind != LayerKind::Head {
            self.add_spec(format!("{name}.norm.scale"), vec![cout], ParamRole::NormScale);
            self.add_spec(format!("{name}.norm.shift"), vec![cout], ParamRole::NormShift);
        }
        self.layers.push(Layer {
            kind,
            cin,
            cout,
            first_param,
        });
    }

    fn add_spec(&mut self, name: String, shape: Vec<usize>, role: ParamRole) {
        let offset = self.specs.last().map_or(0, |s| s.offset + s.len);
        let len = shape.iter().product();
        self.specs.push(ParamSpec {
            name,
            shape,
            offset,
            len,
            role,
        });
    }

    pub fn total_len(&self) -> usize {
        self.specs.last().map_or(0, |s| s.offset + s.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamRole {
    Weight { fan_in: usize, head: bool },
    Bias,
    NormScale,
    NormShift,
}

impl ParamRole {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::Weight { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub role: ParamRole,
}

/// All network parameters in one flat buffer, addressed through ordered,
/// uniquely named tensor specs.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    data: Vec<T>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::new(cfg);
        let n = arch.total_len();
        Ok(NetworkParams {
            config: *cfg,
            specs: arch.specs,
            data: vec![T::zero(); n],
        })
    }

    pub fn from_flat(cfg: &NetworkConfig, data: Vec<T>) -> Result<Self> {
        let mut p = NetworkParams::zeros(cfg)?;
        if data.len() != p.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a network with {} parameters",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `(name, shape, values)` in architecture order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &[usize], &[T])> {
        self.specs
            .iter()
            .map(move |s| (s.name.as_str(), s.shape.as_slice(), &self.data[s.offset..s.offset + s.len]))
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub(crate) fn tensor(&self, index: usize) -> &[T] {
        let s = &self.specs[index];
        &self.data[s.offset..s.offset + s.len]
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config,
            specs: self.specs.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Closed-form parameter count of the architecture for `cfg`.
pub fn parameter_count(cfg: &NetworkConfig) -> usize {
    Architecture::new(cfg).total_len()
}

/// Fan-in scaled uniform weights (bound `sqrt(6 / fan_in)` for hidden
/// layers, `1 / sqrt(fan_in)` for heads), zero biases, unit norm scales and
/// zero norm shifts.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams<f32>> {
    let mut params = NetworkParams::<f32>::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in params.specs.clone() {
        let values = &mut params.data[spec.offset..spec.offset + spec.len];
        match spec.role {
            ParamRole::Weight { fan_in, head } => {
                let bound = if head {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                for v in values {
                    *v = (bound * (2.0 * rng.gen::<f64>() - 1.0)) as f32;
                }
            }
            ParamRole::Bias | ParamRole::NormShift => values.fill(0.0),
            ParamRole::NormScale => values.fill(1.0),
        }
    }
    Ok(params)
}
