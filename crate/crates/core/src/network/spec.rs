use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One layer of a network description.
///
/// The first `OrConv` applied to an unoriented map lifts it to `N`
/// orientation channels by replication.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv { out: usize, kernel: usize, padding: usize },
    /// `out` is the number of ARFs; the layer emits `out · N` channels.
    OrConv { out: usize, kernel: usize, padding: usize },
    MaxPool,
    GlobalMaxPool,
    Relu,
    Dropout { rate: f64 },
    Linear { out: usize },
    OrAlign,
    OrPooling,
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::OrConv { .. } => "orconv",
            LayerSpec::MaxPool => "maxpool",
            LayerSpec::GlobalMaxPool => "gmaxpool",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Linear { .. } => "fc",
            LayerSpec::OrAlign => "oralign",
            LayerSpec::OrPooling => "orpooling",
            LayerSpec::SoftmaxOutput => "softmax",
        }
    }

    pub fn has_parameters(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::OrConv { .. } | LayerSpec::Linear { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { out, kernel, padding } | LayerSpec::OrConv { out, kernel, padding } => {
                write!(f, "{}({out},{kernel},{padding})", self.name())
            }
            LayerSpec::Dropout { rate } => write!(f, "dropout({rate})"),
            LayerSpec::Linear { out } => write!(f, "fc({out})"),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(&s[i + 1..s.len() - 1])),
            Some(_) => return Err(Error::Config(format!("malformed layer '{s}'"))),
            None => (s, None),
        };
        let ints = |want: usize| -> Result<Vec<usize>> {
            let a = args.ok_or_else(|| Error::Config(format!("layer '{head}' needs {want} argument(s)")))?;
            let v: Vec<usize> = a
                .split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::Config(format!("bad argument '{x}' in '{s}'"))))
                .collect::<Result<_>>()?;
            if v.len() != want {
                return Err(Error::Config(format!("layer '{head}' takes {want} argument(s), got {}", v.len())));
            }
            Ok(v)
        };
        let none = |layer: LayerSpec| -> Result<LayerSpec> {
            match args {
                None => Ok(layer),
                Some(_) => Err(Error::Config(format!("layer '{head}' takes no arguments"))),
            }
        };
        match head {
            "conv" => {
                let v = ints(3)?;
                Ok(LayerSpec::Conv { out: v[0], kernel: v[1], padding: v[2] })
            }
            "orconv" => {
                let v = ints(3)?;
                Ok(LayerSpec::OrConv { out: v[0], kernel: v[1], padding: v[2] })
            }
            "fc" => Ok(LayerSpec::Linear { out: ints(1)?[0] }),
            "dropout" => {
                let a = args.ok_or_else(|| Error::Config("dropout needs a rate".into()))?;
                let rate = a.trim().parse().map_err(|_| Error::Config(format!("bad dropout rate '{a}'")))?;
                Ok(LayerSpec::Dropout { rate })
            }
            "maxpool" => none(LayerSpec::MaxPool),
            "gmaxpool" => none(LayerSpec::GlobalMaxPool),
            "relu" => none(LayerSpec::Relu),
            "oralign" => none(LayerSpec::OrAlign),
            "orpooling" => none(LayerSpec::OrPooling),
            "softmax" => none(LayerSpec::SoftmaxOutput),
            _ => Err(Error::Config(format!("unknown layer '{head}'"))),
        }
    }
}

/// Rotation-invariant encoding applied to the final oriented descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Encoding {
    #[default]
    None,
    OrAlign,
    OrPooling,
}

impl Encoding {
    pub fn name(&self) -> &'static str {
        match self {
            Encoding::None => "none",
            Encoding::OrAlign => "oralign",
            Encoding::OrPooling => "orpooling",
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Encoding::None),
            "oralign" => Ok(Encoding::OrAlign),
            "orpooling" => Ok(Encoding::OrPooling),
            _ => Err(Error::Config(format!("unknown encoding '{s}' (expected none, oralign or orpooling)"))),
        }
    }
}

/// Named topologies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Baseline,
    Orn4,
    Orn8,
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::Orn4 => "orn4",
            Architecture::Orn8 => "orn8",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "baseline" => Ok(Architecture::Baseline),
            "orn4" => Ok(Architecture::Orn4),
            "orn8" => Ok(Architecture::Orn8),
            _ => Err(Error::Config(format!("unknown network '{s}' (expected baseline, orn4 or orn8)"))),
        }
    }
}

/// Activation layout after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// `c` features with `n` orientation channels each on an `h × w` plane
    /// (stored as `c · n` channels, orientation fastest).
    Map { c: usize, n: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { c, n, h, w } => c * n * h * w,
            Shape::Flat { f } => f,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-sample tensor extents.
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Map { c, n, h, w } => vec![c * n, h, w],
            Shape::Flat { f } => vec![f],
        }
    }
}

/// Conv/ORConv/FC widths for the named topologies.
pub const BASELINE_WIDTHS: [usize; 4] = [32, 64, 128, 256];
pub const ORN_WIDTHS: [usize; 4] = [4, 8, 16, 32];
pub const HIDDEN_UNITS: usize = 512;
pub const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input `(channels, height, width)`.
    pub input: (usize, usize, usize),
    /// Orientation count `N` used by every ORConv layer (1 for plain CNNs).
    pub orientations: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: (usize, usize, usize), orientations: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            input,
            orientations,
            layers,
        };
        spec.plan()?;
        Ok(spec)
    }

    fn head(layers: &mut Vec<LayerSpec>, dropout: f64) {
        layers.extend([
            LayerSpec::GlobalMaxPool,
            LayerSpec::Linear { out: HIDDEN_UNITS },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::Linear { out: MNIST_CLASSES },
            LayerSpec::SoftmaxOutput,
        ]);
    }

    /// Four 3×3 convolutions (32-64-128-256) with two 2×2 max-pools, global
    /// max pooling, then FC(512) and FC(10).
    pub fn baseline(dropout: f64) -> Self {
        let mut layers = Vec::new();
        for (i, &out) in BASELINE_WIDTHS.iter().enumerate() {
            layers.push(LayerSpec::Conv { out, kernel: 3, padding: 1 });
            layers.push(LayerSpec::Relu);
            if i < 2 {
                layers.push(LayerSpec::MaxPool);
            }
        }
        Self::head(&mut layers, dropout);
        Self::new((1, 28, 28), 1, layers).expect("baseline topology is consistent")
    }

    /// The baseline skeleton with ORConv layers of 4-8-16-32 ARFs and the
    /// chosen encoding in front of the classifier.
    pub fn orn(orientations: usize, encoding: Encoding, dropout: f64) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, &out) in ORN_WIDTHS.iter().enumerate() {
            layers.push(LayerSpec::OrConv { out, kernel: 3, padding: 1 });
            layers.push(LayerSpec::Relu);
            if i < 2 {
                layers.push(LayerSpec::MaxPool);
            }
        }
        let mut tail = Vec::new();
        Self::head(&mut tail, dropout);
        layers.push(tail.remove(0));
        match encoding {
            Encoding::None => {}
            Encoding::OrAlign => layers.push(LayerSpec::OrAlign),
            Encoding::OrPooling => layers.push(LayerSpec::OrPooling),
        }
        layers.extend(tail);
        Self::new((1, 28, 28), orientations, layers)
    }

    pub fn preset(arch: Architecture, encoding: Encoding, dropout: f64) -> Result<Self> {
        match arch {
            Architecture::Baseline if encoding != Encoding::None => Err(Error::Config(format!(
                "the baseline network has no orientation channels to encode (encoding {encoding})"
            ))),
            Architecture::Baseline => Ok(Self::baseline(dropout)),
            Architecture::Orn4 => Self::orn(4, encoding, dropout),
            Architecture::Orn8 => Self::orn(8, encoding, dropout),
        }
    }

    pub fn encoding(&self) -> Encoding {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::OrAlign => Some(Encoding::OrAlign),
                LayerSpec::OrPooling => Some(Encoding::OrPooling),
                _ => None,
            })
            .unwrap_or(Encoding::None)
    }

    pub fn classes(&self) -> usize {
        match self.plan().ok().and_then(|p| p.last().copied()) {
            Some(Shape::Flat { f }) => f,
            _ => 0,
        }
    }

    fn topology(&self, index: usize, msg: impl Into<String>) -> Error {
        Error::Topology {
            index,
            layer: self.layers.get(index).map_or("input".into(), |l| l.to_string()),
            msg: msg.into(),
        }
    }

    /// Output shape of every layer; rejects inconsistent plumbing with the
    /// index of the first failing layer.
    pub fn plan(&self) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input;
        let big_n = self.orientations;
        if c == 0 || h == 0 || w == 0 {
            return Err(self.topology(0, "input extents must be positive"));
        }
        if big_n == 0 {
            return Err(self.topology(0, "orientation count must be at least 1"));
        }
        let last_orconv = self.layers.iter().rposition(|l| matches!(l, LayerSpec::OrConv { .. }));
        let mut shape = Shape::Map { c, n: 1, h, w };
        let mut plan = Vec::with_capacity(self.layers.len());
        let mut encoded = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| self.topology(i, msg);
            if encoded && matches!(layer, LayerSpec::OrConv { .. }) {
                return Err(err("ORConv after the invariant encoding".into()));
            }
            shape = match (*layer, shape) {
                (LayerSpec::Conv { out, kernel, padding }, Shape::Map { n, h, w, .. })
                | (LayerSpec::OrConv { out, kernel, padding }, Shape::Map { n, h, w, .. }) => {
                    let oriented = matches!(layer, LayerSpec::OrConv { .. });
                    if out == 0 {
                        return Err(err("output width must be positive".into()));
                    }
                    if kernel % 2 == 0 {
                        return Err(err(format!("kernel extent {kernel} must be odd")));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(err(format!("{kernel}×{kernel} kernel does not fit a {h}×{w} map with padding {padding}")));
                    }
                    if !oriented && n != 1 {
                        return Err(err(format!("plain convolution on a map with {n} orientation channels")));
                    }
                    if oriented && n != 1 && n != big_n {
                        return Err(err(format!("input carries {n} orientation channels, layer uses {big_n}")));
                    }
                    let (oh, ow) = (h + 2 * padding - kernel + 1, w + 2 * padding - kernel + 1);
                    Shape::Map {
                        c: out,
                        n: if oriented { big_n } else { 1 },
                        h: oh,
                        w: ow,
                    }
                }
                (LayerSpec::MaxPool, Shape::Map { c, n, h, w }) => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(err(format!("2×2 pooling needs even extents, got {h}×{w}")));
                    }
                    Shape::Map { c, n, h: h / 2, w: w / 2 }
                }
                (LayerSpec::GlobalMaxPool, Shape::Map { c, n, .. }) => Shape::Map { c, n, h: 1, w: 1 },
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    s
                }
                (LayerSpec::Linear { out }, s) => {
                    if out == 0 {
                        return Err(err("output width must be positive".into()));
                    }
                    let _ = s;
                    Shape::Flat { f: out }
                }
                (LayerSpec::OrAlign, Shape::Map { c, n, h, w }) | (LayerSpec::OrPooling, Shape::Map { c, n, h, w }) => {
                    if encoded {
                        return Err(err("a second invariant encoding".into()));
                    }
                    if last_orconv.is_none_or(|j| j > i) {
                        return Err(err("encoding must follow the last ORConv layer".into()));
                    }
                    if (h, w) != (1, 1) {
                        return Err(err(format!("encoding needs a 1×1 map, got {h}×{w}")));
                    }
                    if n != big_n {
                        return Err(err(format!("expected {big_n} orientation channels, got {n}")));
                    }
                    encoded = true;
                    if matches!(layer, LayerSpec::OrAlign) {
                        Shape::Map { c, n, h: 1, w: 1 }
                    } else {
                        Shape::Map { c, n: 1, h: 1, w: 1 }
                    }
                }
                (LayerSpec::SoftmaxOutput, Shape::Flat { f }) => {
                    if i + 1 != self.layers.len() {
                        return Err(err("the output layer must be last".into()));
                    }
                    Shape::Flat { f }
                }
                (l, s) => return Err(err(format!("{} cannot follow a {s:?} activation", l.name()))),
            };
            plan.push(shape);
        }
        if self.layers.last() != Some(&LayerSpec::SoftmaxOutput) {
            return Err(self.topology(self.layers.len().saturating_sub(1), "network must end with a softmax output"));
        }
        Ok(plan)
    }

    /// Input shape seen by layer `index`.
    pub fn input_shape(&self, plan: &[Shape], index: usize) -> Shape {
        if index == 0 {
            let (c, h, w) = self.input;
            Shape::Map { c, n: 1, h, w }
        } else {
            plan[index - 1]
        }
    }

    /// Closed-form count of materialised parameters (weights plus biases).
    pub fn parameter_count(&self) -> Result<usize> {
        let plan = self.plan()?;
        let mut total = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = self.input_shape(&plan, i);
            total += match (*layer, input) {
                (LayerSpec::Conv { out, kernel, .. }, Shape::Map { c, .. }) => out * c * kernel * kernel + out,
                (LayerSpec::OrConv { out, kernel, .. }, Shape::Map { c, .. }) => {
                    out * c * kernel * kernel * self.orientations + out
                }
                (LayerSpec::Linear { out }, s) => out * s.len() + out,
                _ => 0,
            };
        }
        Ok(total)
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_dropout(&self, rate: f64) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        out
    }
}

/// `input=CxHxW orientations=N | layer | layer | ...`
impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (c, h, w) = self.input;
        write!(f, "input={c}x{h}x{w} orientations={}", self.orientations)?;
        for l in &self.layers {
            write!(f, " | {l}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('|');
        let header = parts.next().unwrap_or_default();
        let mut input = None;
        let mut orientations = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("input", v)) => {
                    let d: Vec<usize> = v
                        .split('x')
                        .map(|x| x.parse().map_err(|_| Error::Config(format!("bad input extents '{v}'"))))
                        .collect::<Result<_>>()?;
                    if d.len() != 3 {
                        return Err(Error::Config(format!("input needs CxHxW, got '{v}'")));
                    }
                    input = Some((d[0], d[1], d[2]));
                }
                Some(("orientations", v)) => {
                    orientations = Some(v.parse().map_err(|_| Error::Config(format!("bad orientation count '{v}'")))?)
                }
                _ => return Err(Error::Config(format!("unexpected token '{tok}' in network header"))),
            }
        }
        let input = input.ok_or_else(|| Error::Config("network header lacks input=CxHxW".into()))?;
        let layers = parts.map(str::parse).collect::<Result<Vec<_>>>()?;
        Self::new(input, orientations.unwrap_or(1), layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_parameter_counts() {
        let base = NetworkSpec::baseline(0.5).parameter_count().unwrap();
        assert_eq!(base, 320 + 18_496 + 73_856 + 295_168 + 131_584 + 5_130);
        let orn8 = NetworkSpec::orn(8, Encoding::OrAlign, 0.5).unwrap().parameter_count().unwrap();
        assert_eq!(orn8, 292 + 2_312 + 9_232 + 36_896 + 131_584 + 5_130);
        let ratio = orn8 as f64 / base as f64;
        assert!(ratio > 0.25 && ratio < 0.40, "{ratio}");
        let p4 = NetworkSpec::orn(4, Encoding::OrPooling, 0.5).unwrap().parameter_count().unwrap();
        let a4 = NetworkSpec::orn(4, Encoding::OrAlign, 0.5).unwrap().parameter_count().unwrap();
        assert!(p4 < a4);
    }

    #[test]
    fn arf_counts_are_one_eighth_of_baseline_filters() {
        for (b, o) in BASELINE_WIDTHS.iter().zip(ORN_WIDTHS) {
            assert_eq!(b / 8, o);
        }
    }

    #[test]
    fn single_orientation_matches_plain_cnn_count() {
        let orn1 = NetworkSpec::orn(1, Encoding::None, 0.5).unwrap();
        let mut plain = orn1.clone();
        for l in &mut plain.layers {
            if let LayerSpec::OrConv { out, kernel, padding } = *l {
                *l = LayerSpec::Conv { out, kernel, padding };
            }
        }
        assert_eq!(orn1.parameter_count().unwrap(), plain.parameter_count().unwrap());
    }

    #[test]
    fn text_round_trip() {
        for spec in [
            NetworkSpec::baseline(0.5),
            NetworkSpec::orn(8, Encoding::OrAlign, 0.25).unwrap(),
            NetworkSpec::orn(4, Encoding::OrPooling, 0.0).unwrap(),
        ] {
            let text = spec.to_string();
            assert_eq!(text.parse::<NetworkSpec>().unwrap(), spec);
        }
        assert_ne!(NetworkSpec::baseline(0.5).fingerprint(), NetworkSpec::baseline(0.4).fingerprint());
    }

    fn topology_index(layers: Vec<LayerSpec>) -> usize {
        match NetworkSpec::new((1, 8, 8), 4, layers).unwrap_err() {
            Error::Topology { index, .. } => index,
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn invalid_plumbing_names_the_layer() {
        use LayerSpec::*;
        let conv = OrConv { out: 2, kernel: 3, padding: 1 };
        assert_eq!(topology_index(vec![conv, Linear { out: 3 }]), 1);
        assert_eq!(topology_index(vec![conv, SoftmaxOutput]), 1);
        assert_eq!(topology_index(vec![conv, OrAlign, Linear { out: 3 }, SoftmaxOutput]), 1);
        assert_eq!(topology_index(vec![conv, GlobalMaxPool, OrAlign, OrPooling, Linear { out: 3 }, SoftmaxOutput]), 3);
        assert_eq!(topology_index(vec![conv, GlobalMaxPool, OrAlign, conv, Linear { out: 3 }, SoftmaxOutput]), 2);
        assert_eq!(topology_index(vec![conv, Conv { out: 2, kernel: 3, padding: 1 }, Linear { out: 3 }, SoftmaxOutput]), 1);
        assert_eq!(topology_index(vec![conv, MaxPool, MaxPool, MaxPool, MaxPool, Linear { out: 3 }, SoftmaxOutput]), 4);
        assert_eq!(topology_index(vec![Linear { out: 3 }, SoftmaxOutput, Relu]), 1);
        assert_eq!(topology_index(vec![Dropout { rate: 1.0 }, Linear { out: 3 }, SoftmaxOutput]), 0);
        assert_eq!(topology_index(vec![OrConv { out: 2, kernel: 4, padding: 1 }, Linear { out: 3 }, SoftmaxOutput]), 0);
        assert_eq!(topology_index(vec![Linear { out: 3 }]), 0);
    }

    #[test]
    fn baseline_cannot_take_an_encoding() {
        assert!(NetworkSpec::preset(Architecture::Baseline, Encoding::OrAlign, 0.5).is_err());
        let s = NetworkSpec::preset(Architecture::Orn8, Encoding::OrAlign, 0.5).unwrap();
        assert_eq!(s.encoding(), Encoding::OrAlign);
        assert_eq!(s.classes(), 10);
    }
}
