//! Latent mixture model: one shared flow whose latent follows a diagonal
//! Gaussian mixture.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{log_sum_exp, Graph, Tensor, Var};
use crate::data::Dataset;
use crate::em::{self, EmConfig, EmModel, InitStrategy, Optimizer, Responsibilities, TrainFailure, TrainingLog, FROZEN_PI};
use crate::error::{ModelError, Result};
use crate::flow::{standard_normal_log_density, standard_normal_matrix, FlowConfig, FlowNetwork, HALF_LOG_2PI};
use crate::genmm::{check_simplex, meta_entries, set_meta};
use crate::init;
use crate::persist::{self, Manifest, PersistError};

pub const SIGMA_FLOOR: f64 = 1e-4;

/// Guard against collapsing latent variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularizerSpec {
    /// Gamma prior with shape `a` and rate `b` on each precision `1/σ`.
    GammaPrior { a: f64, b: f64 },
    /// `-λ Σ (1 - σ)² / K`.
    L2 { lambda: f64 },
    None,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        RegularizerSpec::GammaPrior { a: 2.0, b: 1.0 }
    }
}

impl RegularizerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RegularizerSpec::GammaPrior { a, b } if !(a > 1.0) || !(b > 0.0) => Err(ModelError::InvalidConfig(format!(
                "gamma prior needs a > 1 and b > 0, got a={a} b={b}"
            ))),
            RegularizerSpec::L2 { lambda } if !(lambda >= 0.0) => {
                Err(ModelError::InvalidConfig(format!("l2 weight must be non-negative, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Manifest form: `gamma:a:b`, `l2:lambda` or `none`.
    pub fn encode(&self) -> String {
        match *self {
            RegularizerSpec::GammaPrior { a, b } => format!("gamma:{}:{}", persist::fmt_f64(a), persist::fmt_f64(b)),
            RegularizerSpec::L2 { lambda } => format!("l2:{}", persist::fmt_f64(lambda)),
            RegularizerSpec::None => "none".into(),
        }
    }

    pub fn decode(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| parts.get(i).and_then(|p| p.parse::<f64>().ok());
        match parts[0] {
            "gamma" | "gamma-prior" if parts.len() == 3 => Some(RegularizerSpec::GammaPrior { a: num(1)?, b: num(2)? }),
            "gamma" | "gamma-prior" if parts.len() == 1 => Some(RegularizerSpec::default()),
            "l2" if parts.len() == 2 => Some(RegularizerSpec::L2 { lambda: num(1)? }),
            "none" if parts.len() == 1 => Some(RegularizerSpec::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatMM {
    pi: Vec<f64>,
    /// `[K × M]` latent means.
    mu: Tensor,
    /// `[K × M]` latent log standard deviations.
    log_sigma: Tensor,
    flow: FlowNetwork,
    pub regularizer: RegularizerSpec,
    pub meta: Vec<(String, String)>,
}

impl LatMM {
    /// Random means from `N(0, 0.5 I)`, unit variances, uniform prior.
    pub fn new(k: usize, dim: usize, flow: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(ModelError::InvalidConfig("K must be at least 1".into()));
        }
        let flow = FlowNetwork::new(dim, flow, rng)?;
        let m = flow.latent_dim();
        let normal = Normal::new(0.0, 0.5f64.sqrt()).expect("valid std");
        let mu = Tensor::matrix(k, m, (0..k * m).map(|_| normal.sample(rng)).collect())?;
        Self::from_parts(vec![1.0 / k as f64; k], mu, Tensor::zeros(&[k, m]), flow)
    }

    pub fn from_parts(pi: Vec<f64>, mu: Tensor, log_sigma: Tensor, flow: FlowNetwork) -> Result<Self> {
        check_simplex(&pi)?;
        let shape = [pi.len(), flow.latent_dim()];
        if mu.shape() != shape || log_sigma.shape() != shape {
            return Err(ModelError::InvalidModel(format!(
                "latent parameters must be {shape:?}, got {:?} and {:?}",
                mu.shape(),
                log_sigma.shape()
            )));
        }
        if !mu.all_finite() || !log_sigma.all_finite() {
            return Err(ModelError::InvalidModel("non-finite latent parameters".into()));
        }
        let mut model = Self {
            pi,
            mu,
            log_sigma,
            flow,
            regularizer: RegularizerSpec::default(),
            meta: Vec::new(),
        };
        model.apply_sigma_floor();
        Ok(model)
    }

    /// Convenience constructor taking `σ` rather than `log σ`.
    pub fn with_sigma(pi: Vec<f64>, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, flow: FlowNetwork) -> Result<Self> {
        let mu = Tensor::from_rows(&mu)?;
        let log_sigma = Tensor::from_rows(&sigma.iter().map(|r| r.iter().map(|s| s.ln()).collect()).collect::<Vec<_>>())?;
        Self::from_parts(pi, mu, log_sigma, flow)
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.flow.dim()
    }

    /// Width `M` of the mixture part of the latent.
    pub fn latent_dim(&self) -> usize {
        self.flow.latent_dim()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn log_sigma(&self) -> &Tensor {
        &self.log_sigma
    }

    pub fn sigma(&self, k: usize) -> Vec<f64> {
        self.log_sigma.row(k).iter().map(|l| l.exp()).collect()
    }

    pub fn flow(&self) -> &FlowNetwork {
        &self.flow
    }

    pub fn flow_mut(&mut self) -> &mut FlowNetwork {
        &mut self.flow
    }

    pub fn mu_mut(&mut self) -> &mut Tensor {
        &mut self.mu
    }

    pub fn log_sigma_mut(&mut self) -> &mut Tensor {
        &mut self.log_sigma
    }

    fn frozen(&self, k: usize) -> bool {
        self.pi[k] < FROZEN_PI
    }

    fn apply_sigma_floor(&mut self) {
        let floor = SIGMA_FLOOR.ln();
        for v in self.log_sigma.data_mut() {
            *v = v.max(floor);
        }
    }

    /// Parameter handles in the order flow, `μ`, `log σ`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LatentVars {
        let flow = self.flow.bind(g, trainable);
        let (mu, log_sigma) = if trainable {
            (g.param(self.mu.clone()), g.param(self.log_sigma.clone()))
        } else {
            (g.constant(self.mu.clone()), g.constant(self.log_sigma.clone()))
        };
        LatentVars { flow, mu, log_sigma }
    }

    /// Shared pass through the flow: the mixture part of the latent and the
    /// per-row terms that do not depend on the component (log-determinant and
    /// the density of any factored-out coordinates).
    fn encode_on(&self, g: &mut Graph, vars: &LatentVars, x: Var) -> Result<(Var, Var)> {
        let (z, logdet) = self.flow.infer(g, &vars.flow, x)?;
        let m = self.latent_dim();
        if m == self.dim() {
            return Ok((z, logdet));
        }
        let head = g.slice_cols(z, 0, m)?;
        let tail = g.slice_cols(z, m, self.dim())?;
        let tail_lp = standard_normal_log_density(g, tail)?;
        let shared = g.add(logdet, tail_lp)?;
        Ok((head, shared))
    }

    /// `log N(z_i; μ_k, diag σ_k²)` as an `[n]` vector.
    fn component_density_on(&self, g: &mut Graph, vars: &LatentVars, z: Var, k: usize) -> Result<Var> {
        let n = g.value(z).rows();
        let m = self.latent_dim();
        let mu_k = g.slice_rows(vars.mu, k, k + 1)?;
        let ls_k = g.slice_rows(vars.log_sigma, k, k + 1)?;
        let mu_b = g.broadcast_rows(mu_k, n)?;
        let d = g.sub(z, mu_b)?;
        let neg_ls = g.neg(ls_k)?;
        let inv = g.exp(neg_ls)?;
        let inv_b = g.broadcast_rows(inv, n)?;
        let scaled = g.mul(d, inv_b)?;
        let sq = g.square(scaled)?;
        let s = g.sum_axis(sq, 1)?;
        let s = g.scale(s, -0.5)?;
        let log_norm = g.sum(ls_k)?;
        let s = g.sub(s, log_norm)?;
        let c = g.scalar(-(m as f64) * HALF_LOG_2PI);
        Ok(g.add(s, c)?)
    }

    /// `[n × K]` latent component log-densities at `z = f(x)` (without log-determinant).
    pub fn latent_component_log_density(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.latent_dim() {
            return Err(ModelError::DimMismatch {
                expected: self.latent_dim(),
                got: if z.shape().len() == 2 { z.cols() } else { z.numel() },
            });
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let mut out = Tensor::zeros(&[z.rows(), self.k()]);
        for k in 0..self.k() {
            let lp = self.component_density_on(&mut g, &vars, zv, k)?;
            for (i, v) in g.value(lp).data().iter().enumerate() {
                out.set(i, k, *v);
            }
        }
        Ok(out)
    }

    /// Mixture part of the latent code and the component-independent per-row term.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let (z, shared) = self.encode_on(&mut g, &vars, xv)?;
        Ok((g.value(z).clone(), g.value(shared).data().to_vec()))
    }

    /// E-step posteriors. The flow log-determinant cancels and is not used.
    pub fn responsibilities(&self, x: &Tensor, dim_scaling: bool) -> Result<Responsibilities> {
        let (z, _) = self.encode(x)?;
        let ll = self.latent_component_log_density(&z)?;
        let scale = if dim_scaling { 1.0 / self.dim() as f64 } else { 1.0 };
        Responsibilities::from_log_likelihoods(&ll, &self.pi, scale)
    }

    /// `Σ_i [shared_i + Σ_k γ_ik (log π_k + log N(z_i; μ_k, σ_k²))]` on the graph.
    pub fn q_objective_on(&self, g: &mut Graph, vars: &LatentVars, gamma: &Responsibilities, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if gamma.len() != n || gamma.k() != self.k() {
            return Err(ModelError::DimMismatch {
                expected: n,
                got: gamma.len(),
            });
        }
        let (z, shared) = self.encode_on(g, vars, x)?;
        let mut total = g.sum(shared)?;
        for k in 0..self.k() {
            if self.frozen(k) {
                continue;
            }
            let lp = self.component_density_on(g, vars, z, k)?;
            let w = gamma.column(k);
            let mass: f64 = w.iter().sum();
            let wv = g.constant(Tensor::vector(w));
            let weighted = g.mul(lp, wv)?;
            let term = g.sum(weighted)?;
            let prior = g.scalar(mass * self.pi[k].ln());
            let term = g.add(term, prior)?;
            total = g.add(total, term)?;
        }
        Ok(total)
    }

    pub fn q_objective(&self, gamma: &Responsibilities, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let q = self.q_objective_on(&mut g, &vars, gamma, xv)?;
        Ok(g.value(q).item())
    }

    /// Log of the regulariser on `σ`, normalising constants dropped.
    pub fn regularizer_log_term_on(&self, g: &mut Graph, vars: &LatentVars, spec: RegularizerSpec) -> Result<Var> {
        let k = self.k() as f64;
        match spec {
            RegularizerSpec::GammaPrior { a, b } => {
                // log σ⁻¹ = -log σ
                let neg_ls = g.neg(vars.log_sigma)?;
                let prec = g.exp(neg_ls)?;
                let t1 = g.scale(neg_ls, a - 1.0)?;
                let t2 = g.scale(prec, -b)?;
                let t = g.add(t1, t2)?;
                let s = g.sum(t)?;
                Ok(g.scale(s, 1.0 / k)?)
            }
            RegularizerSpec::L2 { lambda } => {
                let sigma = g.exp(vars.log_sigma)?;
                let one = g.scalar(1.0);
                let d = g.sub(sigma, one)?;
                let sq = g.square(d)?;
                let s = g.sum(sq)?;
                Ok(g.scale(s, -lambda / k)?)
            }
            RegularizerSpec::None => Ok(g.scalar(0.0)),
        }
    }

    pub fn regularizer_log_term(&self, spec: RegularizerSpec) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let r = self.regularizer_log_term_on(&mut g, &vars, spec)?;
        Ok(g.value(r).item())
    }

    pub fn update_prior(&mut self, mean_gamma: &[f64]) {
        assert_eq!(mean_gamma.len(), self.k());
        self.pi = em::prior_from_mean_gamma(mean_gamma);
    }

    /// `log p(x_i)` per row.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, shared) = self.encode(x)?;
        let ll = self.latent_component_log_density(&z)?;
        let log_pi: Vec<f64> = self.pi.iter().map(|p| p.ln()).collect();
        let mut row = vec![0.0; self.k()];
        Ok((0..ll.rows())
            .map(|i| {
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = log_pi[k] + ll.get(i, k);
                }
                shared[i] + log_sum_exp(&row)
            })
            .collect())
    }

    pub fn evaluate_nll(&self, data: &Dataset) -> Result<f64> {
        em::nll_per_dim(self, &data.samples)
    }

    /// Draws `ε` for every row first, then each row's component from `π`.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        if count == 0 {
            return Err(ModelError::InvalidConfig("sample count must be at least 1".into()));
        }
        let mut z = standard_normal_matrix(rng, count, self.dim());
        let pick = WeightedIndex::new(&self.pi).map_err(|e| ModelError::InvalidModel(e.to_string()))?;
        let components: Vec<usize> = (0..count).map(|_| pick.sample(rng)).collect();
        let m = self.latent_dim();
        for (i, &k) in components.iter().enumerate() {
            let row = z.row_mut(i);
            for j in 0..m {
                row[j] = self.mu.get(k, j) + self.log_sigma.get(k, j).exp() * row[j];
            }
        }
        Ok((self.flow.forward_generate(&z)?, components))
    }

    /// Rows decode `α z_start + (1-α) z_end` with `α = 1 - j/(steps-1)`.
    pub fn interpolate(&self, x_start: &[f64], x_end: &[f64], steps: usize) -> Result<Tensor> {
        if steps < 2 {
            return Err(ModelError::InvalidConfig("interpolation needs at least 2 steps".into()));
        }
        let ends = Tensor::from_rows(&[x_start.to_vec(), x_end.to_vec()])?;
        let (z, _) = self.flow.inverse_infer(&ends)?;
        let mut grid = Tensor::zeros(&[steps, self.dim()]);
        for j in 0..steps {
            let alpha = 1.0 - j as f64 / (steps - 1) as f64;
            for (c, v) in grid.row_mut(j).iter_mut().enumerate() {
                *v = alpha * z.get(0, c) + (1.0 - alpha) * z.get(1, c);
            }
        }
        self.flow.forward_generate(&grid)
    }

    /// Input actnorm standardises the data globally, then the latent
    /// components are placed on k-means clusters of the encoded data.
    pub fn init_from_data(&mut self, x: &Tensor, rng: &mut impl Rng) {
        let (mean, std) = init::moments(x, 0..x.rows());
        let std = init::floor_std(&std, &std, 1.0);
        init::fit_input_actnorm(&mut self.flow, &mean, &std);
        let Ok((z, _)) = self.encode(x) else {
            return;
        };
        let (_, global_std) = init::moments(&z, 0..z.rows());
        let clusters = init::kmeans(&z, self.k(), 10, rng);
        let m = self.latent_dim();
        for k in 0..self.k() {
            let members: Vec<usize> = (0..z.rows()).filter(|&i| clusters.assignment[i] == k).collect();
            let (mean, std) = if members.len() >= 2 {
                init::moments(&z, members.iter().copied())
            } else {
                (clusters.centers[k].clone(), global_std.clone())
            };
            let std = init::floor_std(&std, &global_std, 1e-2);
            for j in 0..m {
                self.mu.set(k, j, mean[j]);
                self.log_sigma.set(k, j, std[j].max(SIGMA_FLOOR).ln());
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = vec![
            "kind=latmm".to_string(),
            format!("k={}", self.k()),
            format!("dim={}", self.dim()),
            format!("latent={}", self.latent_dim()),
            format!("pi={}", persist::fmt_f64_list(&self.pi)),
            format!("mu={}", persist::fmt_f64_list(self.mu.data())),
            format!("log_sigma={}", persist::fmt_f64_list(self.log_sigma.data())),
            format!("regularizer={}", self.regularizer.encode()),
        ];
        manifest.extend(self.meta.iter().map(|(k, v)| format!("meta.{k}={v}")));
        let mut out = Vec::new();
        persist::write_header(&mut out, &manifest);
        out.extend_from_slice(&self.flow.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> persist::Result<Self> {
        let (lines, rest) = persist::read_header(bytes)?;
        let m = Manifest::from_lines(&lines)?;
        if m.get("kind")? != "latmm" {
            return Err(PersistError::Manifest("not a LatMM container".into()));
        }
        let k = m.usize("k")?;
        let latent = m.usize("latent")?;
        let (flow, tail) = FlowNetwork::from_bytes(rest)?;
        if !tail.is_empty() {
            return Err(PersistError::Invalid("trailing bytes after flow".into()));
        }
        let invalid = |e: ModelError| PersistError::Invalid(e.to_string());
        let mu = Tensor::matrix(k, latent, m.f64_list("mu")?).map_err(|e| invalid(e.into()))?;
        let log_sigma = Tensor::matrix(k, latent, m.f64_list("log_sigma")?).map_err(|e| invalid(e.into()))?;
        let mut model = Self::from_parts(m.f64_list("pi")?, mu, log_sigma, flow).map_err(invalid)?;
        if model.dim() != m.usize("dim")? {
            return Err(PersistError::Invalid("dimension disagrees with manifest".into()));
        }
        model.regularizer = RegularizerSpec::decode(m.get("regularizer")?)
            .ok_or_else(|| PersistError::Manifest("bad regularizer".into()))?;
        model.meta = meta_entries(&lines);
        Ok(model)
    }
}

/// Graph handles for one bound [`LatMM`].
#[derive(Debug, Clone)]
pub struct LatentVars {
    pub flow: Vec<Var>,
    pub mu: Var,
    pub log_sigma: Var,
}

impl EmModel for LatMM {
    fn dim(&self) -> usize {
        LatMM::dim(self)
    }

    fn pi(&self) -> &[f64] {
        &self.pi
    }

    fn set_pi(&mut self, pi: Vec<f64>) {
        self.pi = pi;
    }

    fn batch_responsibilities(&self, x: &Tensor, dim_scaling: bool) -> Result<Responsibilities> {
        self.responsibilities(x, dim_scaling)
    }

    fn m_step(&mut self, x: &Tensor, gamma: &Responsibilities, opt: &mut Optimizer) -> Result<()> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let q = self.q_objective_on(&mut g, &vars, gamma, xv)?;
        let q = g.scale(q, 1.0 / x.rows() as f64)?;
        let reg = self.regularizer_log_term_on(&mut g, &vars, self.regularizer)?;
        let objective = g.add(q, reg)?;
        g.backward(objective)?;
        let mut slot = 0;
        for (p, v) in self.flow.parameters_mut().into_iter().zip(&vars.flow) {
            opt.ascend(slot, p, g.grad(*v).expect("trainable leaf"));
            slot += 1;
        }
        opt.ascend(slot, &mut self.mu, g.grad(vars.mu).expect("trainable leaf"));
        opt.ascend(slot + 1, &mut self.log_sigma, g.grad(vars.log_sigma).expect("trainable leaf"));
        self.apply_sigma_floor();
        Ok(())
    }

    fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        LatMM::log_likelihood(self, x)
    }
}

pub fn train(model: &mut LatMM, data: &Dataset, config: &EmConfig) -> std::result::Result<TrainingLog, TrainFailure<LatMM>> {
    train_with(model, data, config, |_, _| {})
}

pub fn train_with(
    model: &mut LatMM,
    data: &Dataset,
    config: &EmConfig,
    on_epoch: impl FnMut(&em::EpochRecord, &LatMM),
) -> std::result::Result<TrainingLog, TrainFailure<LatMM>> {
    if let Err(error) = model.regularizer.validate() {
        return Err(TrainFailure {
            epoch: 0,
            error,
            checkpoint: model.clone(),
            log: TrainingLog::default(),
        });
    }
    let scaling = config.dim_scaling.resolve(model.dim());
    set_meta(&mut model.meta, "dim_scaling", &scaling.to_string());
    em::run_em(model, data, config, on_epoch)
}

pub fn fit(
    k: usize,
    flow: &FlowConfig,
    regularizer: RegularizerSpec,
    data: &Dataset,
    config: &EmConfig,
) -> std::result::Result<(LatMM, TrainingLog), TrainFailure<LatMM>> {
    fit_with(k, flow, regularizer, data, config, |_, _| {})
}

pub fn fit_with(
    k: usize,
    flow: &FlowConfig,
    regularizer: RegularizerSpec,
    data: &Dataset,
    config: &EmConfig,
    on_epoch: impl FnMut(&em::EpochRecord, &LatMM),
) -> std::result::Result<(LatMM, TrainingLog), TrainFailure<LatMM>> {
    let mut model = match initialize(k, flow, regularizer, data, config) {
        Ok(m) => m,
        Err(error) => {
            let dim = data.dim().max(1);
            let placeholder = LatMM::from_parts(
                vec![1.0],
                Tensor::zeros(&[1, dim]),
                Tensor::zeros(&[1, dim]),
                FlowNetwork::identity(dim),
            )
            .expect("placeholder model");
            return Err(TrainFailure {
                epoch: 0,
                error,
                checkpoint: placeholder,
                log: TrainingLog::default(),
            });
        }
    };
    let log = train_with(&mut model, data, config, on_epoch)?;
    Ok((model, log))
}

/// The untrained model [`fit`] starts from.
pub fn initialize(
    k: usize,
    flow: &FlowConfig,
    regularizer: RegularizerSpec,
    data: &Dataset,
    config: &EmConfig,
) -> Result<LatMM> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = LatMM::new(k, data.dim(), flow, &mut rng)?;
    model.regularizer = regularizer;
    if config.init == InitStrategy::DataDependent && !data.is_empty() {
        model.init_from_data(&data.samples, &mut rng);
    }
    set_meta(&mut model.meta, "init", config.init.name());
    Ok(model)
}
