//! Invertible flow networks.
//!
//! Layers are stored in inference order (data `x` → latent `z`). Generation
//! runs them in reverse. Every flow step is `Actnorm → Permutation →
//! Coupling`; optional split layers factor coordinates out as standard
//! normal latents and optional squeeze reorders image grids.

mod layers;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

pub use layers::{Actnorm, Coupling, GridShape, Layer, Permutation, PermutationKind, Split};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{ModelError, Result};
use crate::persist::{self, PersistError};

/// `0.5 · log(2π)`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

pub const DEFAULT_CLAMP: f64 = 5.0;
pub const DEFAULT_INIT_RANGE: f64 = 0.05;

/// Architecture of a freshly built [`FlowNetwork`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    /// Number of `Actnorm → Permutation → Coupling` steps.
    pub depth: usize,
    /// Hidden width of coupling networks; `None` means `max(2N, 16)`.
    pub hidden: Option<usize>,
    /// Bound on the magnitude of each coupling log-scale.
    pub clamp: f64,
    /// Step indices after which half of the current coordinates are factored out.
    pub splits: Vec<usize>,
    /// Image grid; when set with even sides a squeeze precedes the first step.
    pub grid: Option<GridShape>,
    /// Coupling weights are drawn from `U(-init_range, init_range)`.
    pub init_range: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: None,
            clamp: DEFAULT_CLAMP,
            splits: Vec::new(),
            grid: None,
            init_range: DEFAULT_INIT_RANGE,
        }
    }
}

impl FlowConfig {
    pub fn with_depth(depth: usize) -> Self {
        Self {
            depth,
            ..Self::default()
        }
    }

    pub fn hidden_width(&self, dim: usize) -> usize {
        self.hidden.unwrap_or_else(|| (2 * dim).max(16))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    dim: usize,
    clamp: f64,
    layers: Vec<Layer>,
}

impl FlowNetwork {
    /// A network with no layers: `f` and `g` are the identity.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            clamp: DEFAULT_CLAMP,
            layers: Vec::new(),
        }
    }

    pub fn new(dim: usize, config: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(ModelError::InvalidConfig("flow dimension must be positive".into()));
        }
        if config.clamp <= 0.0 {
            return Err(ModelError::InvalidConfig("scale clamp must be positive".into()));
        }
        let hidden = config.hidden_width(dim);
        let mut layers = Vec::new();
        if let Some(grid) = config.grid {
            if grid.len() != dim {
                return Err(ModelError::InvalidConfig(format!(
                    "grid {grid:?} does not cover {dim} coordinates"
                )));
            }
            if let Some(sq) = Permutation::squeeze(grid) {
                layers.push(Layer::Permutation(sq));
            }
        }
        let mut width = dim;
        for step in 0..config.depth {
            layers.push(Layer::Actnorm(Actnorm::identity(width)));
            layers.push(Layer::Permutation(Permutation::half_swap(width)));
            layers.push(Layer::Coupling(Coupling::new(
                width,
                hidden,
                config.clamp,
                config.init_range,
                rng,
            )));
            if config.splits.contains(&step) {
                if width < 2 {
                    return Err(ModelError::InvalidConfig(format!(
                        "cannot split a width-{width} signal after step {step}"
                    )));
                }
                let split = Split::halve(width);
                width = split.keep;
                layers.push(Layer::Split(split));
            }
        }
        Self::from_layers(dim, config.clamp, layers)
    }

    /// Validates that consecutive layer widths chain together.
    pub fn from_layers(dim: usize, clamp: f64, layers: Vec<Layer>) -> Result<Self> {
        let mut width = dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.width_in() != width {
                return Err(ModelError::InvalidModel(format!(
                    "layer {i} expects width {}, receives {width}",
                    layer.width_in()
                )));
            }
            width = layer.width_out();
        }
        Ok(Self { dim, clamp, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    /// Width of the final (non-factored) latent block.
    pub fn latent_dim(&self) -> usize {
        self.layers.last().map_or(self.dim, Layer::width_out)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// The first actnorm layer, if it sits directly on the data side.
    pub fn input_actnorm_mut(&mut self) -> Option<&mut Actnorm> {
        match self.layers.first_mut() {
            Some(Layer::Actnorm(a)) => Some(a),
            _ => None,
        }
    }

    /// Registers every parameter on `g` in [`Self::parameters`] order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.dim {
            return Err(ModelError::DimMismatch {
                expected: self.dim,
                got: if x.shape().len() == 2 { x.cols() } else { x.numel() },
            });
        }
        Ok(())
    }

    /// `f`: maps data rows to latents and per-row `log|det ∂f/∂x|`.
    ///
    /// The returned latent matrix has `dim` columns: the final latent block
    /// first, then factored-out blocks from the deepest split to the shallowest.
    pub fn infer(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<(Var, Var)> {
        self.check_width(g.value(x))?;
        let rows = g.value(x).rows();
        let mut h = x;
        let mut logdet = g.constant(Tensor::zeros(&[rows]));
        let mut factored = Vec::new();
        let mut cursor = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            let p = &params[cursor..cursor + n];
            cursor += n;
            match layer {
                Layer::Split(s) => {
                    let out = g.slice_cols(h, s.keep, s.width)?;
                    h = g.slice_cols(h, 0, s.keep)?;
                    factored.push(out);
                }
                other => (h, logdet) = other.infer(g, p, h, logdet)?,
            }
        }
        if factored.is_empty() {
            return Ok((h, logdet));
        }
        let mut parts = vec![h];
        parts.extend(factored.into_iter().rev());
        Ok((g.concat_cols(&parts)?, logdet))
    }

    /// `g`: maps latents (laid out as returned by [`Self::infer`]) to data.
    pub fn generate(&self, g: &mut Graph, params: &[Var], z: Var) -> Result<Var> {
        self.check_width(g.value(z))?;
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut cursor = 0;
        for layer in &self.layers {
            offsets.push(cursor);
            cursor += layer.param_count();
        }
        let latent = self.latent_dim();
        let mut h = g.slice_cols(z, 0, latent)?;
        let mut col = latent;
        for (layer, &off) in self.layers.iter().zip(&offsets).rev() {
            let p = &params[off..off + layer.param_count()];
            match layer {
                Layer::Split(s) => {
                    let w = s.width - s.keep;
                    let part = g.slice_cols(z, col, col + w)?;
                    col += w;
                    h = g.concat_cols(&[h, part])?;
                }
                other => h = other.generate(g, p, h)?,
            }
        }
        Ok(h)
    }

    /// `log N(f(x); 0, I) + log|det ∂f/∂x|` per row, on the graph.
    pub fn log_prob_on(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let (z, logdet) = self.infer(g, params, x)?;
        let lp = standard_normal_log_density(g, z)?;
        Ok(g.add(lp, logdet)?)
    }

    pub fn inverse_infer(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (z, logdet) = self.infer(&mut g, &params, xv)?;
        Ok((g.value(z).clone(), g.value(logdet).data().to_vec()))
    }

    pub fn forward_generate(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let x = self.generate(&mut g, &params, zv)?;
        Ok(g.value(x).clone())
    }

    /// Exact log-density of each row of `x` under the flow with a standard normal latent.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let lp = self.log_prob_on(&mut g, &params, xv)?;
        Ok(g.value(lp).data().to_vec())
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if count == 0 {
            return Err(ModelError::InvalidConfig("sample count must be at least 1".into()));
        }
        let z = standard_normal_matrix(rng, count, self.dim);
        self.forward_generate(&z)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = vec![
            "kind=flow".to_string(),
            format!("dim={}", self.dim),
            format!("clamp={}", persist::fmt_f64(self.clamp)),
            format!("layers={}", self.layers.len()),
        ];
        for layer in &self.layers {
            manifest.push(match layer {
                Layer::Actnorm(a) => format!("layer=actnorm width={}", a.width()),
                Layer::Permutation(p) => format!(
                    "layer=permutation width={} type={} perm={}",
                    p.width(),
                    p.kind.name(),
                    p.perm.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                ),
                Layer::Coupling(c) => format!(
                    "layer=coupling width={} hidden={} clamp={}",
                    c.width,
                    c.hidden,
                    persist::fmt_f64(c.clamp)
                ),
                Layer::Split(s) => format!("layer=split width={} keep={}", s.width, s.keep),
            });
        }
        let mut out = Vec::new();
        persist::write_header(&mut out, &manifest);
        for t in self.parameters() {
            persist::push_f64s(&mut out, t.data());
        }
        out
    }

    /// Parses one flow blob from the front of `bytes`; returns it and the unread tail.
    pub fn from_bytes(bytes: &[u8]) -> persist::Result<(Self, &[u8])> {
        let (lines, mut payload) = persist::read_header(bytes)?;
        let bad = |m: String| PersistError::Manifest(m);
        let mut it = lines.iter();
        let mut header = std::collections::BTreeMap::new();
        for _ in 0..4 {
            let line = it.next().ok_or_else(|| bad("flow manifest too short".into()))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            header.insert(k.to_string(), v.to_string());
        }
        if header.get("kind").map(String::as_str) != Some("flow") {
            return Err(bad("not a flow blob".into()));
        }
        let num = |k: &str| -> persist::Result<&str> {
            header
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| bad(format!("missing {k}")))
        };
        let dim: usize = num("dim")?.parse().map_err(|_| bad("bad dim".into()))?;
        let clamp: f64 = num("clamp")?.parse().map_err(|_| bad("bad clamp".into()))?;
        let count: usize = num("layers")?.parse().map_err(|_| bad("bad layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let line = it.next().ok_or_else(|| bad("missing layer line".into()))?;
            let f = persist::line_fields(line);
            let get = |k: &str| f.get(k).copied().ok_or_else(|| bad(format!("{line:?}: missing {k}")));
            let int = |k: &str| -> persist::Result<usize> {
                get(k)?.parse().map_err(|_| bad(format!("{line:?}: bad {k}")))
            };
            let width = int("width")?;
            let layer = match get("layer")? {
                "actnorm" => {
                    let mut p = take_tensors(&mut payload, &[[1, width], [1, width]])?;
                    let shift = p.pop().expect("two tensors");
                    let log_scale = p.pop().expect("two tensors");
                    Layer::Actnorm(Actnorm { log_scale, shift })
                }
                "permutation" => {
                    let kind = PermutationKind::parse(get("type")?)
                        .ok_or_else(|| bad(format!("{line:?}: unknown permutation type")))?;
                    let perm = persist::parse_usize_list(get("perm")?)?;
                    let mut p = Permutation::custom(perm)
                        .ok_or_else(|| bad(format!("{line:?}: not a bijection")))?;
                    if p.width() != width {
                        return Err(bad(format!("{line:?}: width mismatch")));
                    }
                    p.kind = kind;
                    Layer::Permutation(p)
                }
                "coupling" => {
                    let hidden = int("hidden")?;
                    let c: f64 = get("clamp")?
                        .parse()
                        .map_err(|_| bad(format!("{line:?}: bad clamp")))?;
                    let shapes = Coupling::param_shapes(width, hidden);
                    let p = take_tensors(&mut payload, &shapes)?;
                    Layer::Coupling(Coupling::from_params(width, hidden, c, p))
                }
                "split" => Layer::Split(Split {
                    width,
                    keep: int("keep")?,
                }),
                other => return Err(bad(format!("unknown layer type {other:?}"))),
            };
            layers.push(layer);
        }
        if it.next().is_some() {
            return Err(bad("trailing manifest lines".into()));
        }
        let net = Self::from_layers(dim, clamp, layers).map_err(|e| PersistError::Invalid(e.to_string()))?;
        Ok((net, payload))
    }
}

fn take_tensors(payload: &mut &[u8], shapes: &[[usize; 2]]) -> persist::Result<Vec<Tensor>> {
    shapes
        .iter()
        .map(|s| {
            let data = persist::take_f64s(payload, s[0] * s[1])?;
            Tensor::new(s.to_vec(), data).map_err(|e| PersistError::Invalid(e.to_string()))
        })
        .collect()
}

/// Row-wise `log N(z; 0, I)`.
pub fn standard_normal_log_density(g: &mut Graph, z: Var) -> Result<Var> {
    let n = g.value(z).cols();
    let sq = g.square(z)?;
    let s = g.sum_axis(sq, 1)?;
    let s = g.scale(s, -0.5)?;
    let c = g.scalar(-(n as f64) * HALF_LOG_2PI);
    Ok(g.add(s, c)?)
}

/// `rows × cols` matrix of independent standard normal draws, row-major order.
pub fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

pub fn log_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Coupling whose networks output the constants `m_a = scale`, `m_b = shift`.
    fn constant_coupling(width: usize, scale: f64, shift: f64) -> Coupling {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Coupling::new(width, 4, DEFAULT_CLAMP, 0.0, &mut rng);
        // raw head s with c·tanh(s/c) = ln(scale)
        let target = scale.ln() / DEFAULT_CLAMP;
        let raw = DEFAULT_CLAMP * target.atanh();
        c.b_scale.data_mut().iter_mut().for_each(|v| *v = raw);
        c.b_shift.data_mut().iter_mut().for_each(|v| *v = shift);
        c
    }

    #[test]
    fn constant_coupling_inference_and_generation() {
        let net = FlowNetwork::from_layers(
            2,
            DEFAULT_CLAMP,
            vec![Layer::Coupling(constant_coupling(2, 2.0, 1.0))],
        )
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.5, 1.0]]).unwrap();
        let (z, logdet) = net.inverse_infer(&x).unwrap();
        assert!((z.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((z.get(0, 1) - 3.0).abs() < 1e-12);
        assert!((logdet[0] - 2f64.ln()).abs() < 1e-12);

        let back = net
            .forward_generate(&Tensor::from_rows(&[vec![0.5, 3.0]]).unwrap())
            .unwrap();
        assert!((back.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((back.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_flow() {
        let net = FlowNetwork::identity(2);
        let x = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.0, 0.0]]).unwrap();
        let (z, logdet) = net.inverse_infer(&x).unwrap();
        assert_eq!(z, x);
        assert_eq!(logdet, vec![0.0, 0.0]);
        assert_eq!(net.forward_generate(&x).unwrap(), x);

        let lp = net.log_prob(&Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap()).unwrap();
        assert!((lp[0] + log_2pi()).abs() < 1e-12);
        assert!((lp[0] - (-1.837877)).abs() < 1e-6);
        assert!((lp[1] - (-log_2pi() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn actnorm_log_prob_closed_form() {
        let net = FlowNetwork::from_layers(
            2,
            DEFAULT_CLAMP,
            vec![Layer::Actnorm(Actnorm::from_scale(&[2.0, 2.0], &[0.0, 0.0]))],
        )
        .unwrap();
        let lp = net.log_prob(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert!((lp[0] - (-log_2pi() + 2.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn identity_sample_is_the_seeded_gaussian_stream() {
        let net = FlowNetwork::identity(3);
        let s = net.sample(5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let direct = standard_normal_matrix(&mut ChaCha8Rng::seed_from_u64(11), 5, 3);
        assert_eq!(s, direct);
        assert!(net.sample(0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn width_mismatch_is_reported() {
        let net = FlowNetwork::identity(3);
        let x = Tensor::zeros(&[2, 2]);
        assert_eq!(
            net.log_prob(&x),
            Err(ModelError::DimMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn split_network_round_trip_and_latent_dim() {
        let cfg = FlowConfig {
            depth: 3,
            splits: vec![0, 1],
            init_range: 0.4,
            ..FlowConfig::default()
        };
        let net = FlowNetwork::new(8, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(net.latent_dim(), 2);
        let x = standard_normal_matrix(&mut ChaCha8Rng::seed_from_u64(4), 10, 8);
        let (z, _) = net.inverse_infer(&x).unwrap();
        assert_eq!(z.cols(), 8);
        let back = net.forward_generate(&z).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn squeeze_is_applied_for_even_grids_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = FlowConfig {
            depth: 1,
            grid: Some(GridShape {
                channels: 1,
                height: 4,
                width: 4,
            }),
            ..FlowConfig::default()
        };
        let net = FlowNetwork::new(16, &cfg, &mut rng).unwrap();
        assert!(matches!(
            &net.layers()[0],
            Layer::Permutation(Permutation {
                kind: PermutationKind::Squeeze,
                ..
            })
        ));
        let cfg = FlowConfig {
            grid: Some(GridShape {
                channels: 1,
                height: 7,
                width: 7,
            }),
            ..cfg
        };
        let net = FlowNetwork::new(49, &cfg, &mut rng).unwrap();
        assert!(matches!(&net.layers()[0], Layer::Actnorm(_)));
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let cfg = FlowConfig {
            depth: 2,
            splits: vec![0],
            init_range: 0.3,
            ..FlowConfig::default()
        };
        let net = FlowNetwork::new(5, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"NNMM");
        let (loaded, rest) = FlowNetwork::from_bytes(&bytes).unwrap();
        assert!(rest.is_empty());
        assert_eq!(loaded, net);
        assert_eq!(loaded.to_bytes(), bytes);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let net = FlowNetwork::new(4, &FlowConfig::with_depth(1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bytes = net.to_bytes();
        assert!(matches!(
            FlowNetwork::from_bytes(&bytes[..bytes.len() - 3]),
            Err(PersistError::Truncated(_))
        ));
    }
}
