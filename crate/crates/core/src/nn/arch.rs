use std::fmt;

use serde::{Deserialize, Serialize};

use super::NnError;

/// One layer of the supported vocabulary. Convolutions are 3x3, stride 1,
/// valid padding; pooling is 2x2 with stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d { filters: usize },
    MaxPool2d,
    Flatten,
    Dense { units: usize },
    Relu,
    Softmax,
}

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "({h},{w},{c})"),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub id: String,
    pub input_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Input shapes of every layer followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let shapes = self.shape_chain()?;
        let n = self.layers.len();
        if n < 2
            || self.layers[n - 1] != LayerSpec::Softmax
            || self.layers[n - 2]
                != (LayerSpec::Dense {
                    units: self.num_classes,
                })
        {
            return Err(NnError::InvalidArchitecture(format!(
                "{}: must end with Dense({}) then Softmax",
                self.id, self.num_classes
            )));
        }
        if self.num_classes < 2 {
            return Err(NnError::InvalidArchitecture(format!(
                "{}: needs at least 2 classes",
                self.id
            )));
        }
        Ok(shapes)
    }

    /// Shape propagation only, without the classifier-head requirement.
    fn shape_chain(&self) -> Result<Vec<Shape>, NnError> {
        let invalid = |msg: String| NnError::InvalidArchitecture(format!("{}: {msg}", self.id));
        if self.input_size == 0 || self.channels == 0 {
            return Err(invalid("empty input".into()));
        }
        let mut shape = Shape::Spatial {
            h: self.input_size,
            w: self.input_size,
            c: self.channels,
        };
        let mut shapes = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, shape) {
                (LayerSpec::Conv2d { filters }, Shape::Spatial { h, w, .. }) => {
                    if h < KERNEL || w < KERNEL || filters == 0 {
                        return Err(invalid(format!("conv at layer {i} gets {shape}")));
                    }
                    Shape::Spatial {
                        h: h - KERNEL + 1,
                        w: w - KERNEL + 1,
                        c: filters,
                    }
                }
                (LayerSpec::MaxPool2d, Shape::Spatial { h, w, c }) => {
                    if h < 2 || w < 2 {
                        return Err(invalid(format!("pool at layer {i} gets {shape}")));
                    }
                    Shape::Spatial {
                        h: h / 2,
                        w: w / 2,
                        c,
                    }
                }
                (LayerSpec::Flatten, s @ Shape::Spatial { .. }) => Shape::Flat(s.len()),
                (LayerSpec::Dense { units }, Shape::Flat(_)) if units > 0 => Shape::Flat(units),
                (LayerSpec::Relu, s) => s,
                (LayerSpec::Softmax, s @ Shape::Flat(_)) if i + 1 == self.layers.len() => s,
                (layer, s) => {
                    return Err(invalid(format!("{layer:?} cannot follow shape {s} at layer {i}")))
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        self.shapes().map(|_| ())
    }

    /// Shapes of the weight tensors, in storage order (weight then bias per
    /// parametric layer). Conv kernels are `(filters, 3, 3, c_in)`, dense
    /// weights `(in, out)`.
    pub fn weight_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (layer, input) in self.layers.iter().zip(&shapes) {
            match (*layer, *input) {
                (LayerSpec::Conv2d { filters }, Shape::Spatial { c, .. }) => {
                    out.push(vec![filters, KERNEL, KERNEL, c]);
                    out.push(vec![filters]);
                }
                (LayerSpec::Dense { units }, Shape::Flat(n)) => {
                    out.push(vec![n, units]);
                    out.push(vec![units]);
                }
                _ => {}
            }
        }
        Ok(out)
    }

    /// Names matching [`Self::weight_shapes`], e.g. `conv0.kernel`, `dense2.bias`.
    pub fn weight_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { .. } => {
                    names.push(format!("conv{i}.kernel"));
                    names.push(format!("conv{i}.bias"));
                }
                LayerSpec::Dense { .. } => {
                    names.push(format!("dense{i}.weight"));
                    names.push(format!("dense{i}.bias"));
                }
                _ => {}
            }
        }
        names
    }

    pub fn output_shape(&self) -> Result<Shape, NnError> {
        Ok(*self.shapes()?.last().expect("input shape always present"))
    }

    /// Slots varied by the width search: the single conv layer and the hidden dense layer.
    fn reducible_slots(&self) -> Result<(usize, usize), NnError> {
        let convs: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect();
        let denses: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        match (convs.as_slice(), denses.as_slice()) {
            ([conv], [hidden, _output]) if conv < hidden => Ok((*conv, *hidden)),
            _ => Err(NnError::NonReducibleArchitecture(self.id.clone())),
        }
    }

    /// `(filters, neurons)` of the reducible slots.
    pub fn widths(&self) -> Result<(usize, usize), NnError> {
        let (conv, hidden) = self.reducible_slots()?;
        match (self.layers[conv], self.layers[hidden]) {
            (LayerSpec::Conv2d { filters }, LayerSpec::Dense { units }) => Ok((filters, units)),
            _ => unreachable!("slots are conv and dense"),
        }
    }

    /// Copy with the conv filter count and hidden dense width replaced.
    pub fn with_widths(&self, filters: usize, neurons: usize) -> Result<Self, NnError> {
        let (conv, hidden) = self.reducible_slots()?;
        let mut out = self.clone();
        out.layers[conv] = LayerSpec::Conv2d { filters };
        out.layers[hidden] = LayerSpec::Dense { units: neurons };
        out.id = format!("{}@{filters}x{neurons}", base_id(&self.id));
        out.validate()?;
        Ok(out)
    }

    /// Copy for a different input size. Trailing conv/pool blocks that no
    /// longer fit the smaller input are dropped.
    pub fn fit_to_input(&self, input_size: usize) -> Result<Self, NnError> {
        let mut out = self.clone();
        out.input_size = input_size;
        loop {
            match out.validate() {
                Ok(()) => return Ok(out),
                Err(e) => {
                    let last_conv = out
                        .layers
                        .iter()
                        .rposition(|l| matches!(l, LayerSpec::Conv2d { .. }));
                    match last_conv {
                        Some(i) if i > 0 => {
                            let end = if out.layers.get(i + 1) == Some(&LayerSpec::MaxPool2d) {
                                i + 2
                            } else {
                                i + 1
                            };
                            out.layers.drain(i..end);
                        }
                        _ => return Err(e),
                    }
                }
            }
        }
    }
}

fn base_id(id: &str) -> &str {
    id.split('@').next().unwrap_or(id)
}

/// Trainable parameter count: `f * (9 * c_in) + f` per conv, `in * out + out` per dense.
pub fn param_count(arch: &ArchitectureSpec) -> Result<usize, NnError> {
    let shapes = arch.shape_chain()?;
    Ok(arch
        .layers
        .iter()
        .zip(&shapes)
        .map(|(layer, input)| match (*layer, *input) {
            (LayerSpec::Conv2d { filters }, Shape::Spatial { c, .. }) => {
                filters * KERNEL * KERNEL * c + filters
            }
            (LayerSpec::Dense { units }, Shape::Flat(n)) => n * units + units,
            _ => 0,
        })
        .sum())
}

pub const PRESET_IDS: [&str; 4] = ["d1m1", "d2m1", "d2m2", "d3m2"];

fn conv_pool(filters: usize) -> [LayerSpec; 2] {
    [LayerSpec::Conv2d { filters }, LayerSpec::MaxPool2d]
}

/// Builds a preset by id. Accepts `<preset>` or `<preset>@<filters>x<neurons>`
/// (the latter only for single-conv presets).
pub fn preset(
    id: &str,
    input_size: usize,
    channels: usize,
    num_classes: usize,
) -> Result<ArchitectureSpec, NnError> {
    let (name, widths) = match id.split_once('@') {
        Some((name, w)) => {
            let parsed = w
                .split_once('x')
                .and_then(|(f, n)| Some((f.parse::<usize>().ok()?, n.parse::<usize>().ok()?)));
            match parsed {
                Some(p) => (name, Some(p)),
                None => return Err(NnError::UnknownPreset(id.to_string())),
            }
        }
        None => (id, None),
    };
    use LayerSpec::*;
    let layers: Vec<LayerSpec> = match name {
        "d1m1" => [
            &conv_pool(30)[..],
            &[Flatten, Dense { units: 50 }, Relu],
        ]
        .concat(),
        "d2m1" => [
            &conv_pool(32)[..],
            &[Flatten, Dense { units: 128 }, Relu],
        ]
        .concat(),
        "d2m2" => [
            &conv_pool(32)[..],
            &conv_pool(64),
            &[Flatten, Dense { units: 256 }, Relu, Dense { units: 128 }, Relu],
        ]
        .concat(),
        "d3m2" => [
            &conv_pool(32)[..],
            &conv_pool(32),
            &conv_pool(32),
            &conv_pool(64),
            &[
                Flatten,
                Dense { units: 128 },
                Relu,
                Dense { units: 50 },
                Relu,
                Dense { units: 20 },
                Relu,
            ],
        ]
        .concat(),
        _ => return Err(NnError::UnknownPreset(id.to_string())),
    };
    let mut layers = layers;
    layers.push(Dense { units: num_classes });
    layers.push(Softmax);
    let arch = ArchitectureSpec {
        id: name.to_string(),
        input_size,
        channels,
        num_classes,
        layers,
    };
    let arch = match widths {
        Some((f, n)) => arch.with_widths(f, n)?,
        None => arch,
    };
    arch.validate()?;
    Ok(arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_and_dense_counts() {
        let arch = preset("d1m1", 10, 3, 2).unwrap();
        // conv 30 on 3 channels: 30*27 + 30
        let conv_only = 30 * 27 + 30;
        assert_eq!(conv_only, 840);
        let flat = 4 * 4 * 30;
        assert_eq!(
            param_count(&arch).unwrap(),
            840 + flat * 50 + 50 + 50 * 2 + 2
        );
    }

    #[test]
    fn dense_50_to_2_is_102() {
        let arch = ArchitectureSpec {
            id: "t".into(),
            input_size: 5,
            channels: 2,
            num_classes: 2,
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Softmax],
        };
        assert_eq!(param_count(&arch).unwrap(), 50 * 2 + 2);
    }

    #[test]
    fn parameter_free_layers_count_zero() {
        let arch = ArchitectureSpec {
            id: "t".into(),
            input_size: 4,
            channels: 1,
            num_classes: 2,
            layers: vec![LayerSpec::MaxPool2d, LayerSpec::Flatten, LayerSpec::Relu, LayerSpec::Softmax],
        };
        assert_eq!(param_count(&arch).unwrap(), 0);
    }

    #[test]
    fn shape_chain() {
        let arch = preset("d2m2", 50, 3, 2).unwrap();
        let shapes = arch.shapes().unwrap();
        assert_eq!(shapes[1], Shape::Spatial { h: 48, w: 48, c: 32 });
        assert_eq!(shapes[2], Shape::Spatial { h: 24, w: 24, c: 32 });
        assert_eq!(shapes[4], Shape::Spatial { h: 11, w: 11, c: 64 });
        assert_eq!(shapes[5], Shape::Flat(11 * 11 * 64));
        assert_eq!(*shapes.last().unwrap(), Shape::Flat(2));
    }

    #[test]
    fn d3m2_needs_room_for_four_blocks() {
        assert!(preset("d3m2", 50, 3, 5).is_ok());
        assert!(preset("d3m2", 8, 3, 5).is_err());
        let fitted = preset("d3m2", 50, 3, 5).unwrap().fit_to_input(8).unwrap();
        let convs = fitted
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .count();
        assert_eq!(convs, 1);
        assert_eq!(fitted.output_shape().unwrap(), Shape::Flat(5));
    }

    #[test]
    fn widths_round_trip() {
        let arch = preset("d1m1@8x16", 30, 3, 2).unwrap();
        assert_eq!(arch.widths().unwrap(), (8, 16));
        assert_eq!(arch.id, "d1m1@8x16");
        assert!(matches!(
            preset("d2m2", 30, 3, 2).unwrap().widths(),
            Err(NnError::NonReducibleArchitecture(_))
        ));
        assert!(matches!(preset("d9", 30, 3, 2), Err(NnError::UnknownPreset(_))));
        assert!(matches!(preset("d1m1@8", 30, 3, 2), Err(NnError::UnknownPreset(_))));
    }

    #[test]
    fn weight_names_align_with_shapes() {
        let arch = preset("d2m2", 20, 3, 4).unwrap();
        assert_eq!(arch.weight_names().len(), arch.weight_shapes().unwrap().len());
        assert_eq!(arch.weight_names()[0], "conv0.kernel");
    }
}
