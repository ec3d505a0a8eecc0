use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Element-wise affine layer: inference maps `h ↦ h ⊙ scale + shift`.
///
/// The scale is stored as its logarithm so it stays positive under
/// unconstrained gradient steps; the log-det is `Σ log_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Actnorm {
    pub log_scale: Tensor,
    pub shift: Tensor,
}

impl Actnorm {
    pub fn identity(width: usize) -> Self {
        Self {
            log_scale: Tensor::zeros(&[1, width]),
            shift: Tensor::zeros(&[1, width]),
        }
    }

    /// Builds from an explicit positive scale vector.
    pub fn from_scale(scale: &[f64], shift: &[f64]) -> Self {
        assert!(scale.iter().all(|&s| s > 0.0), "actnorm scale must be positive");
        assert_eq!(scale.len(), shift.len());
        let w = scale.len();
        Self {
            log_scale: Tensor::new(vec![1, w], scale.iter().map(|s| s.ln()).collect()).expect("shape"),
            shift: Tensor::new(vec![1, w], shift.to_vec()).expect("shape"),
        }
    }

    pub fn width(&self) -> usize {
        self.log_scale.numel()
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.data().iter().map(|l| l.exp()).collect()
    }

    fn infer(&self, g: &mut Graph, p: &[Var], h: Var, logdet: Var) -> Result<(Var, Var)> {
        let rows = g.value(h).rows();
        let scale = g.exp(p[0])?;
        let scale = g.broadcast_rows(scale, rows)?;
        let shift = g.broadcast_rows(p[1], rows)?;
        let scaled = g.mul(h, scale)?;
        let z = g.add(scaled, shift)?;
        let ld = g.sum(p[0])?;
        let logdet = g.add(logdet, ld)?;
        Ok((z, logdet))
    }

    fn generate(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let rows = g.value(z).rows();
        let scale = g.exp(p[0])?;
        let scale = g.broadcast_rows(scale, rows)?;
        let shift = g.broadcast_rows(p[1], rows)?;
        let centered = g.sub(z, shift)?;
        Ok(g.div(centered, scale)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PermutationKind {
    HalfSwap,
    Squeeze,
    Custom,
}

impl PermutationKind {
    pub fn name(self) -> &'static str {
        match self {
            PermutationKind::HalfSwap => "halfswap",
            PermutationKind::Squeeze => "squeeze",
            PermutationKind::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "halfswap" => Some(PermutationKind::HalfSwap),
            "squeeze" => Some(PermutationKind::Squeeze),
            "custom" => Some(PermutationKind::Custom),
            _ => None,
        }
    }
}

/// Fixed reordering of coordinates; output column `j` reads input `perm[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Permutation {
    pub perm: Vec<usize>,
    pub kind: PermutationKind,
}

impl Permutation {
    /// Moves the second half in front of the first, so the next coupling
    /// transforms the coordinates the previous one left untouched.
    pub fn half_swap(width: usize) -> Self {
        let h = width / 2;
        Self {
            perm: (0..width).map(|j| (j + h) % width.max(1)).collect(),
            kind: PermutationKind::HalfSwap,
        }
    }

    /// Space-to-depth reshape of a `(c, h, w)` grid into `(4c, h/2, w/2)`.
    /// Returns `None` when the grid sides are odd.
    pub fn squeeze(grid: GridShape) -> Option<Self> {
        let GridShape {
            channels,
            height,
            width,
        } = grid;
        if height % 2 != 0 || width % 2 != 0 || grid.is_empty() {
            return None;
        }
        let (oh, ow) = (height / 2, width / 2);
        let mut perm = vec![0; grid.len()];
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let src = c * height * width + y * width + x;
                    let oc = c * 4 + (y % 2) * 2 + (x % 2);
                    let dst = oc * oh * ow + (y / 2) * ow + x / 2;
                    perm[dst] = src;
                }
            }
        }
        Some(Self {
            perm,
            kind: PermutationKind::Squeeze,
        })
    }

    pub fn custom(perm: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || seen[p] {
                return None;
            }
            seen[p] = true;
        }
        Some(Self {
            perm,
            kind: PermutationKind::Custom,
        })
    }

    pub fn width(&self) -> usize {
        self.perm.len()
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &p) in self.perm.iter().enumerate() {
            inv[p] = j;
        }
        inv
    }
}

/// Affine coupling. Inference keeps `h_a` and maps
/// `h_b ↦ m_a(h_a) ⊙ h_b + m_b(h_a)`; generation divides back out.
///
/// `m_a = exp(c · tanh(s / c))` where `s` is the raw scale head, so the
/// log-scale never exceeds the clamp `c` in magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub width: usize,
    pub split: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w_scale: Tensor,
    pub b_scale: Tensor,
    pub w_shift: Tensor,
    pub b_shift: Tensor,
}

impl Coupling {
    pub fn new(width: usize, hidden: usize, clamp: f64, init_range: f64, rng: &mut impl Rng) -> Self {
        let split = width / 2;
        let nb = width - split;
        let mut uniform = |r: usize, c: usize| {
            let data = (0..r * c)
                .map(|_| {
                    if init_range > 0.0 {
                        rng.random_range(-init_range..init_range)
                    } else {
                        0.0
                    }
                })
                .collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        let w1 = uniform(split, hidden);
        let w2 = uniform(hidden, hidden);
        let w_scale = uniform(hidden, nb);
        let w_shift = uniform(hidden, nb);
        Self {
            width,
            split,
            hidden,
            clamp,
            w1,
            b1: Tensor::zeros(&[1, hidden]),
            w2,
            b2: Tensor::zeros(&[1, hidden]),
            w_scale,
            b_scale: Tensor::zeros(&[1, nb]),
            w_shift,
            b_shift: Tensor::zeros(&[1, nb]),
        }
    }

    /// Shapes of the eight parameter tensors in storage order.
    pub fn param_shapes(width: usize, hidden: usize) -> [[usize; 2]; 8] {
        let split = width / 2;
        let nb = width - split;
        [
            [split, hidden],
            [1, hidden],
            [hidden, hidden],
            [1, hidden],
            [hidden, nb],
            [1, nb],
            [hidden, nb],
            [1, nb],
        ]
    }

    pub(crate) fn from_params(width: usize, hidden: usize, clamp: f64, mut p: Vec<Tensor>) -> Self {
        debug_assert_eq!(p.len(), 8);
        let b_shift = p.pop().expect("8 params");
        let w_shift = p.pop().expect("8 params");
        let b_scale = p.pop().expect("8 params");
        let w_scale = p.pop().expect("8 params");
        let b2 = p.pop().expect("8 params");
        let w2 = p.pop().expect("8 params");
        let b1 = p.pop().expect("8 params");
        let w1 = p.pop().expect("8 params");
        Self {
            width,
            split: width / 2,
            hidden,
            clamp,
            w1,
            b1,
            w2,
            b2,
            w_scale,
            b_scale,
            w_shift,
            b_shift,
        }
    }

    fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let rows = g.value(x).rows();
        let xw = g.matmul(x, w)?;
        let bias = g.broadcast_rows(b, rows)?;
        Ok(g.add(xw, bias)?)
    }

    /// Returns `(log m_a, m_b)` evaluated on the pass-through half.
    fn scale_and_shift(&self, g: &mut Graph, p: &[Var], ha: Var) -> Result<(Var, Var)> {
        let t1 = Self::dense(g, ha, p[0], p[1])?;
        let t1 = g.tanh(t1)?;
        let t2 = Self::dense(g, t1, p[2], p[3])?;
        let t2 = g.tanh(t2)?;
        let raw = Self::dense(g, t2, p[4], p[5])?;
        let squashed = g.scale(raw, 1.0 / self.clamp)?;
        let squashed = g.tanh(squashed)?;
        let log_scale = g.scale(squashed, self.clamp)?;
        let shift = Self::dense(g, t2, p[6], p[7])?;
        Ok((log_scale, shift))
    }

    fn infer(&self, g: &mut Graph, p: &[Var], h: Var, logdet: Var) -> Result<(Var, Var)> {
        let ha = g.slice_cols(h, 0, self.split)?;
        let hb = g.slice_cols(h, self.split, self.width)?;
        let (log_scale, shift) = self.scale_and_shift(g, p, ha)?;
        let scale = g.exp(log_scale)?;
        let scaled = g.mul(scale, hb)?;
        let zb = g.add(scaled, shift)?;
        let z = g.concat_cols(&[ha, zb])?;
        let ld = g.sum_axis(log_scale, 1)?;
        let logdet = g.add(logdet, ld)?;
        Ok((z, logdet))
    }

    fn generate(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        let za = g.slice_cols(z, 0, self.split)?;
        let zb = g.slice_cols(z, self.split, self.width)?;
        let (log_scale, shift) = self.scale_and_shift(g, p, za)?;
        let scale = g.exp(log_scale)?;
        let centered = g.sub(zb, shift)?;
        let hb = g.div(centered, scale)?;
        Ok(g.concat_cols(&[za, hb])?)
    }
}

/// Factors out the trailing `width - keep` coordinates as standard-normal latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split {
    pub width: usize,
    pub keep: usize,
}

impl Split {
    pub fn halve(width: usize) -> Self {
        Self {
            width,
            keep: width - width / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Actnorm(Actnorm),
    Permutation(Permutation),
    Coupling(Coupling),
    Split(Split),
}

impl Layer {
    pub fn width_in(&self) -> usize {
        match self {
            Layer::Actnorm(a) => a.width(),
            Layer::Permutation(p) => p.width(),
            Layer::Coupling(c) => c.width,
            Layer::Split(s) => s.width,
        }
    }

    pub fn width_out(&self) -> usize {
        match self {
            Layer::Split(s) => s.keep,
            other => other.width_in(),
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Layer::Actnorm(a) => vec![&a.log_scale, &a.shift],
            Layer::Coupling(c) => vec![
                &c.w1, &c.b1, &c.w2, &c.b2, &c.w_scale, &c.b_scale, &c.w_shift, &c.b_shift,
            ],
            Layer::Permutation(_) | Layer::Split(_) => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Actnorm(a) => vec![&mut a.log_scale, &mut a.shift],
            Layer::Coupling(c) => vec![
                &mut c.w1,
                &mut c.b1,
                &mut c.w2,
                &mut c.b2,
                &mut c.w_scale,
                &mut c.b_scale,
                &mut c.w_shift,
                &mut c.b_shift,
            ],
            Layer::Permutation(_) | Layer::Split(_) => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Actnorm(_) => 2,
            Layer::Coupling(_) => 8,
            Layer::Permutation(_) | Layer::Split(_) => 0,
        }
    }

    /// Inference step for non-split layers.
    pub(crate) fn infer(&self, g: &mut Graph, p: &[Var], h: Var, logdet: Var) -> Result<(Var, Var)> {
        match self {
            Layer::Actnorm(a) => a.infer(g, p, h, logdet),
            Layer::Coupling(c) => c.infer(g, p, h, logdet),
            Layer::Permutation(perm) => Ok((g.permute_cols(h, &perm.perm)?, logdet)),
            Layer::Split(_) => unreachable!("split is handled by the network"),
        }
    }

    pub(crate) fn generate(&self, g: &mut Graph, p: &[Var], z: Var) -> Result<Var> {
        match self {
            Layer::Actnorm(a) => a.generate(g, p, z),
            Layer::Coupling(c) => c.generate(g, p, z),
            Layer::Permutation(perm) => Ok(g.permute_cols(z, &perm.inverse())?),
            Layer::Split(_) => unreachable!("split is handled by the network"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_swap_is_a_bijection() {
        for w in 1..9 {
            let p = Permutation::half_swap(w);
            assert!(Permutation::custom(p.perm.clone()).is_some(), "width {w}");
        }
        assert_eq!(Permutation::half_swap(2).perm, vec![1, 0]);
        assert_eq!(Permutation::half_swap(3).perm, vec![1, 2, 0]);
    }

    #[test]
    fn squeeze_groups_two_by_two_blocks() {
        let p = Permutation::squeeze(GridShape {
            channels: 1,
            height: 2,
            width: 4,
        })
        .unwrap();
        // out channels: (dy,dx) = (0,0),(0,1),(1,0),(1,1), each 1x2
        assert_eq!(p.perm, vec![0, 2, 1, 3, 4, 6, 5, 7]);
        assert!(Permutation::custom(p.perm).is_some());
        assert!(Permutation::squeeze(GridShape {
            channels: 1,
            height: 7,
            width: 7
        })
        .is_none());
    }

    #[test]
    fn custom_rejects_non_bijections() {
        assert!(Permutation::custom(vec![0, 0]).is_none());
        assert!(Permutation::custom(vec![0, 2]).is_none());
    }
}
