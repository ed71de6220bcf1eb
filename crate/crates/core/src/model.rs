//! Network representation, exact evaluation, and model/input file formats.
//!
//! A [`Network`] is a feedforward stack of dense layers, each applying
//! `a = sigma(W a_prev + b)` with a per-layer activation. The JSON model format
//! mirrors the constructor: `input_dim` plus a list of layers with row-major
//! weight matrices. All arithmetic is `f64`; loading followed by saving is
//! bit-identical on the numeric payload.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::{Error, Result};

/// Scalar activation applied elementwise by a layer.
///
/// `Identity` exists for affine (logit) layers and exactness tests; the
/// remaining kinds are the nonlinearities supported by the relaxation machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Arctan,
    Identity,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::Tanh,
        ActivationKind::Sigmoid,
        ActivationKind::Arctan,
        ActivationKind::Identity,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Arctan => x.atan(),
            ActivationKind::Identity => x,
        }
    }

    /// First derivative. For ReLU the subgradient at 0 is taken as 0; the
    /// relaxation code never differentiates ReLU.
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Arctan => 1.0 / (1.0 + x * x),
            ActivationKind::Identity => 1.0,
        }
    }

    /// True for the s-shaped kinds (convex below 0, concave above 0).
    pub fn is_s_shaped(self) -> bool {
        matches!(
            self,
            ActivationKind::Tanh | ActivationKind::Sigmoid | ActivationKind::Arctan
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Arctan => "arctan",
            ActivationKind::Identity => "identity",
        }
    }

    fn parse(name: &str, layer: usize) -> Result<Self> {
        match name {
            "relu" => Ok(ActivationKind::Relu),
            "tanh" => Ok(ActivationKind::Tanh),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "arctan" => Ok(ActivationKind::Arctan),
            "identity" => Ok(ActivationKind::Identity),
            _ => Err(Error::UnknownActivation {
                layer,
                name: name.to_string(),
            }),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    // split on the sign so exp never overflows
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One dense layer: `weights` is `[n_out, n_in]`, `bias` is `[n_out]`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: ActivationKind,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Feedforward classifier. Invariants established at construction:
/// at least one layer, consecutive dimensions chain, every entry finite,
/// and the final layer emits at least two classes.
#[derive(Debug, Clone)]
pub struct Network {
    input_dim: usize,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidModel("input_dim must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidModel("network has no layers".into()));
        }
        let mut expected = input_dim;
        for (k, layer) in layers.iter().enumerate() {
            if layer.in_dim() != expected {
                return Err(Error::DimensionMismatch {
                    layer: k,
                    detail: format!(
                        "weight matrix expects {} inputs, previous layer provides {expected}",
                        layer.in_dim()
                    ),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::DimensionMismatch {
                    layer: k,
                    detail: format!(
                        "bias has {} entries, weight matrix has {} rows",
                        layer.bias.len(),
                        layer.out_dim()
                    ),
                });
            }
            if layer.out_dim() == 0 {
                return Err(Error::DimensionMismatch {
                    layer: k,
                    detail: "layer has zero output neurons".into(),
                });
            }
            let finite = layer.weights.iter().all(|w| w.is_finite())
                && layer.bias.iter().all(|b| b.is_finite());
            if !finite {
                return Err(Error::InvalidModel(format!(
                    "layer {k} contains a non-finite weight or bias"
                )));
            }
            expected = layer.out_dim();
        }
        if expected < 2 {
            return Err(Error::InvalidModel(format!(
                "final layer has {expected} output(s); a classifier needs at least 2"
            )));
        }
        Ok(Network { input_dim, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Exact forward evaluation to the logits.
    ///
    /// Panics if `x` does not match `input_dim`; callers validate user input
    /// once via [`InputSpec::new`].
    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.input_dim, "input dimension mismatch");
        let mut a = x.clone();
        for layer in &self.layers {
            let z = layer.weights.dot(&a) + &layer.bias;
            a = z.mapv(|v| layer.activation.eval(v));
        }
        a
    }

    /// Margin `g_t(x) = f_c(x) - f_t(x)`; positive means class `c` beats `t` at `x`.
    pub fn margin(&self, x: &Array1<f64>, c: usize, t: usize) -> f64 {
        let logits = self.forward(x);
        logits[c] - logits[t]
    }

    /// Strict argmax of the logits at `x`; a tie is an error because no
    /// positive-radius certificate exists there.
    pub fn predicted_class(&self, x: &Array1<f64>) -> Result<usize> {
        let logits = self.forward(x);
        let mut best = 0usize;
        for j in 1..logits.len() {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        for j in 0..logits.len() {
            if j != best && logits[j] == logits[best] {
                return Err(Error::TiedArgmax {
                    a: best.min(j),
                    b: best.max(j),
                    logit: logits[best],
                });
            }
        }
        Ok(best)
    }
}

/// Perturbation norm for the input ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
    LInf,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Norm::L1),
            "2" => Ok(Norm::L2),
            "inf" => Ok(Norm::LInf),
            _ => Err(Error::InvalidParameter(format!(
                "unknown norm {s:?} (expected inf|1|2)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::LInf => "inf",
        }
    }

    pub fn norm(self, v: &Array1<f64>) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::LInf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        }
    }

    /// Dual norm `||v||_q` with `1/p + 1/q = 1`; this is the Hoelder factor in
    /// the closed-form optimum of an affine function over the ball.
    pub fn dual_norm(self, v: &Array1<f64>) -> f64 {
        match self {
            Norm::L1 => Norm::LInf.norm(v),
            Norm::L2 => Norm::L2.norm(v),
            Norm::LInf => Norm::L1.norm(v),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A certification instance: nominal input, ball geometry, the predicted class
/// `c` (always recomputed from the network, never trusted from a file), and the
/// attack targets to certify against.
#[derive(Debug, Clone)]
pub struct InputSpec {
    pub x0: Array1<f64>,
    pub epsilon: f64,
    pub norm: Norm,
    pub c: usize,
    pub targets: Vec<usize>,
}

impl InputSpec {
    /// Builds a spec, recomputing `c` by strict argmax. `targets = None` (or an
    /// empty list) means every class except `c`.
    pub fn new(
        net: &Network,
        x0: Array1<f64>,
        epsilon: f64,
        norm: Norm,
        targets: Option<&[usize]>,
    ) -> Result<Self> {
        if x0.len() != net.input_dim() {
            return Err(Error::InvalidInput(format!(
                "x0 has {} entries, network expects {}",
                x0.len(),
                net.input_dim()
            )));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("x0 contains a non-finite entry".into()));
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidInput(format!(
                "epsilon must be finite and nonnegative, got {epsilon}"
            )));
        }
        let c = net.predicted_class(&x0)?;
        let classes = net.num_classes();
        let targets = match targets {
            None | Some([]) => (0..classes).filter(|&t| t != c).collect(),
            Some(list) => {
                let mut out = Vec::with_capacity(list.len());
                for &t in list {
                    if t >= classes {
                        return Err(Error::InvalidInput(format!(
                            "target class {t} out of range (network has {classes} classes)"
                        )));
                    }
                    if t == c {
                        return Err(Error::InvalidInput(format!(
                            "target class {t} equals the predicted class"
                        )));
                    }
                    if !out.contains(&t) {
                        out.push(t);
                    }
                }
                out
            }
        };
        Ok(InputSpec {
            x0,
            epsilon,
            norm,
            c,
            targets,
        })
    }

    /// Same instance at a different ball radius.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut s = self.clone();
        s.epsilon = epsilon;
        s
    }
}

// --- file formats ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: String,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    input_dim: usize,
    layers: Vec<LayerFile>,
}

/// Per-input file: the nominal point and an optional dataset label. The label
/// is metadata only; the certified class is always the network's prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputFile {
    pub x0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

fn parse_error(text: &str, err: &serde_json::Error) -> Error {
    let (line, column) = (err.line(), err.column());
    let offset = text
        .lines()
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum::<usize>()
        + column.saturating_sub(1);
    Error::Parse {
        offset,
        line,
        column,
        message: err.to_string(),
    }
}

/// Parses a network from JSON text.
pub fn network_from_json(text: &str) -> Result<Network> {
    let file: NetworkFile = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (k, lf) in file.layers.into_iter().enumerate() {
        let activation = ActivationKind::parse(&lf.activation, k)?;
        let rows = lf.weights.len();
        if rows == 0 {
            return Err(Error::DimensionMismatch {
                layer: k,
                detail: "weight matrix has no rows".into(),
            });
        }
        let cols = lf.weights[0].len();
        for (i, row) in lf.weights.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    layer: k,
                    detail: format!(
                        "weight row {i} has {} entries, row 0 has {cols}",
                        row.len()
                    ),
                });
            }
        }
        let flat: Vec<f64> = lf.weights.into_iter().flatten().collect();
        let weights = Array2::from_shape_vec((rows, cols), flat).expect("shape checked");
        layers.push(Layer {
            weights,
            bias: Array1::from_vec(lf.bias),
            activation,
        });
    }
    Network::new(file.input_dim, layers)
}

/// Serializes a network to the JSON model format.
pub fn network_to_json(net: &Network) -> String {
    let file = NetworkFile {
        input_dim: net.input_dim(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerFile {
                weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
                bias: l.bias.to_vec(),
                activation: l.activation.as_str().to_string(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("network serialization cannot fail")
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    network_from_json(&text)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, network_to_json(net))?;
    Ok(())
}

pub fn input_from_json(text: &str) -> Result<InputFile> {
    let file: InputFile = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    if file.x0.is_empty() {
        return Err(Error::InvalidInput("x0 is empty".into()));
    }
    Ok(file)
}

pub fn load_input(path: &Path) -> Result<InputFile> {
    let text = std::fs::read_to_string(path)?;
    input_from_json(&text)
}
