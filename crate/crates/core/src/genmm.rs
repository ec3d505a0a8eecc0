//! Generator mixture model: `K` invertible flows sharing a standard normal
//! latent, mixed by a prior `π`. Trained with the batched EM loop in
//! [`crate::em`].

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Distribution;

use crate::autodiff::{log_sum_exp, Graph, Tensor, Var};
use crate::data::Dataset;
use crate::em::{self, EmConfig, EmModel, InitStrategy, Optimizer, Responsibilities, TrainFailure, TrainingLog, FROZEN_PI};
use crate::error::{ModelError, Result};
use crate::flow::{standard_normal_matrix, FlowConfig, FlowNetwork};
use crate::init;
use crate::persist::{self, Manifest, PersistError};

/// How the generator is picked for each endpoint of an interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// The component with the largest responsibility.
    ArgmaxGamma,
    /// A component drawn from the prior.
    RandomPrior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenMM {
    pi: Vec<f64>,
    generators: Vec<FlowNetwork>,
    /// Free-form provenance written to the model manifest (`meta.<key>=<value>`).
    pub meta: Vec<(String, String)>,
}

impl GenMM {
    /// `k` independently initialised generators with a uniform prior.
    pub fn new(k: usize, dim: usize, flow: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(ModelError::InvalidConfig("K must be at least 1".into()));
        }
        let generators = (0..k)
            .map(|_| FlowNetwork::new(dim, flow, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(vec![1.0 / k as f64; k], generators)
    }

    pub fn from_parts(pi: Vec<f64>, generators: Vec<FlowNetwork>) -> Result<Self> {
        if pi.len() != generators.len() || pi.is_empty() {
            return Err(ModelError::InvalidModel(format!(
                "{} prior weights for {} generators",
                pi.len(),
                generators.len()
            )));
        }
        check_simplex(&pi)?;
        let dim = generators[0].dim();
        if generators.iter().any(|g| g.dim() != dim) {
            return Err(ModelError::InvalidModel("generators disagree on dimension".into()));
        }
        Ok(Self {
            pi,
            generators,
            meta: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.generators[0].dim()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn generators(&self) -> &[FlowNetwork] {
        &self.generators
    }

    pub fn generators_mut(&mut self) -> &mut [FlowNetwork] {
        &mut self.generators
    }

    fn frozen(&self, k: usize) -> bool {
        self.pi[k] < FROZEN_PI
    }

    /// `log p_k(x_i)` for every row `i` and component `k`, as an `[n × K]` matrix.
    pub fn component_log_likelihood(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        let mut out = Tensor::zeros(&[n, self.k()]);
        for (k, gen) in self.generators.iter().enumerate() {
            let lp = gen.log_prob(x).map_err(|e| e.in_component(k))?;
            for (i, v) in lp.into_iter().enumerate() {
                out.set(i, k, v);
            }
        }
        Ok(out)
    }

    /// E-step posteriors, optionally from per-dimension log-likelihoods.
    pub fn responsibilities(&self, x: &Tensor, dim_scaling: bool) -> Result<Responsibilities> {
        let ll = self.component_log_likelihood(x)?;
        let scale = if dim_scaling { 1.0 / self.dim() as f64 } else { 1.0 };
        Responsibilities::from_log_likelihoods(&ll, &self.pi, scale)
    }

    /// Binds each non-frozen generator's parameters as trainable leaves.
    pub fn bind(&self, g: &mut Graph) -> Vec<Option<Vec<Var>>> {
        (0..self.k())
            .map(|k| (!self.frozen(k)).then(|| self.generators[k].bind(g, true)))
            .collect()
    }

    /// `Σ_i Σ_k γ_ik [log π_k + log p(f_k(x_i)) + log|det ∂f_k/∂x|]` on the graph.
    ///
    /// Frozen components (unbound) are skipped. `π` enters as a constant.
    pub fn q_objective_on(
        &self,
        g: &mut Graph,
        bound: &[Option<Vec<Var>>],
        gamma: &Responsibilities,
        x: Var,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        if gamma.len() != n || gamma.k() != self.k() {
            return Err(ModelError::DimMismatch {
                expected: n,
                got: gamma.len(),
            });
        }
        let mut total = g.scalar(0.0);
        for (k, params) in bound.iter().enumerate() {
            let Some(params) = params else { continue };
            let lp = self.generators[k]
                .log_prob_on(g, params, x)
                .map_err(|e| e.in_component(k))?;
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

    /// Value of the M-step objective.
    pub fn q_objective(&self, gamma: &Responsibilities, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bound: Vec<Option<Vec<Var>>> = (0..self.k())
            .map(|k| (!self.frozen(k)).then(|| self.generators[k].bind(&mut g, false)))
            .collect();
        let xv = g.constant(x.clone());
        let q = self.q_objective_on(&mut g, &bound, gamma, xv)?;
        Ok(g.value(q).item())
    }

    /// `π ← mean_gamma` (renormalised onto the simplex).
    pub fn update_prior(&mut self, mean_gamma: &[f64]) {
        assert_eq!(mean_gamma.len(), self.k());
        self.pi = em::prior_from_mean_gamma(mean_gamma);
    }

    /// `log Σ_k π_k p_k(x_i)` per row.
    pub fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        let ll = self.component_log_likelihood(x)?;
        let log_pi: Vec<f64> = self.pi.iter().map(|p| p.ln()).collect();
        let mut row = vec![0.0; self.k()];
        Ok((0..ll.rows())
            .map(|i| {
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = log_pi[k] + ll.get(i, k);
                }
                log_sum_exp(&row)
            })
            .collect())
    }

    /// Mean negative log-likelihood in nats per dimension.
    pub fn evaluate_nll(&self, data: &Dataset) -> Result<f64> {
        em::nll_per_dim(self, &data.samples)
    }

    /// Ancestral sampling; returns samples and the component that generated each.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        if count == 0 {
            return Err(ModelError::InvalidConfig("sample count must be at least 1".into()));
        }
        let pick = WeightedIndex::new(&self.pi).map_err(|e| ModelError::InvalidModel(e.to_string()))?;
        let components: Vec<usize> = (0..count).map(|_| pick.sample(rng)).collect();
        let z = standard_normal_matrix(rng, count, self.dim());
        let mut out = Tensor::zeros(&[count, self.dim()]);
        for k in 0..self.k() {
            let rows: Vec<usize> = (0..count).filter(|&i| components[i] == k).collect();
            if rows.is_empty() {
                continue;
            }
            let x = self.generators[k]
                .forward_generate(&z.select_rows(&rows))
                .map_err(|e| e.in_component(k))?;
            for (j, &i) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(x.row(j));
            }
        }
        Ok((out, components))
    }

    /// Generator chosen for a single sample.
    pub fn select_component(&self, x: &[f64], selection: Selection, rng: &mut impl Rng) -> Result<usize> {
        match selection {
            Selection::ArgmaxGamma => {
                let row = Tensor::from_rows(&[x.to_vec()])?;
                Ok(self.responsibilities(&row, false)?.argmax(0))
            }
            Selection::RandomPrior => {
                let pick = WeightedIndex::new(&self.pi).map_err(|e| ModelError::InvalidModel(e.to_string()))?;
                Ok(pick.sample(rng))
            }
        }
    }

    /// Latent-space interpolation between two data points.
    ///
    /// Row `j` decodes `α z_start + (1-α) z_end` with `α = 1 - j/(steps-1)`,
    /// using the start generator while `α ≥ 0.5` and the end generator after.
    pub fn interpolate(
        &self,
        x_start: &[f64],
        x_end: &[f64],
        steps: usize,
        selection: Selection,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if steps < 2 {
            return Err(ModelError::InvalidConfig("interpolation needs at least 2 steps".into()));
        }
        let k_start = self.select_component(x_start, selection, rng)?;
        let k_end = self.select_component(x_end, selection, rng)?;
        let encode = |k: usize, x: &[f64]| -> Result<Vec<f64>> {
            let (z, _) = self.generators[k].inverse_infer(&Tensor::from_rows(&[x.to_vec()])?)?;
            Ok(z.into_data())
        };
        let z_start = encode(k_start, x_start)?;
        let z_end = encode(k_end, x_end)?;
        let mut out = Tensor::zeros(&[steps, self.dim()]);
        for j in 0..steps {
            let alpha = 1.0 - j as f64 / (steps - 1) as f64;
            let z: Vec<f64> = z_start
                .iter()
                .zip(&z_end)
                .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
                .collect();
            let k = if alpha >= 0.5 { k_start } else { k_end };
            let x = self.generators[k].forward_generate(&Tensor::from_rows(&[z])?)?;
            out.row_mut(j).copy_from_slice(x.row(0));
        }
        Ok(out)
    }

    /// Seeds component `k` at the `k`-th k-means cluster: its input actnorm
    /// whitens the cluster. The prior stays uniform.
    pub fn init_from_data(&mut self, x: &Tensor, rng: &mut impl Rng) {
        let (_, global_std) = init::moments(x, 0..x.rows());
        let clusters = init::kmeans(x, self.k(), 10, rng);
        for (k, gen) in self.generators.iter_mut().enumerate() {
            let members: Vec<usize> = (0..x.rows()).filter(|&i| clusters.assignment[i] == k).collect();
            let (mean, std) = if members.len() >= 2 {
                init::moments(x, members.iter().copied())
            } else {
                (clusters.centers[k].clone(), global_std.clone())
            };
            let std = init::floor_std(&std, &global_std, 1e-2);
            init::fit_input_actnorm(gen, &mean, &std);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = vec![
            "kind=genmm".to_string(),
            format!("k={}", self.k()),
            format!("dim={}", self.dim()),
            format!("pi={}", persist::fmt_f64_list(&self.pi)),
        ];
        manifest.extend(self.meta.iter().map(|(k, v)| format!("meta.{k}={v}")));
        let mut out = Vec::new();
        persist::write_header(&mut out, &manifest);
        for gen in &self.generators {
            out.extend_from_slice(&gen.to_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> persist::Result<Self> {
        let (lines, mut rest) = persist::read_header(bytes)?;
        let m = Manifest::from_lines(&lines)?;
        if m.get("kind")? != "genmm" {
            return Err(PersistError::Manifest("not a GenMM container".into()));
        }
        let k = m.usize("k")?;
        let pi = m.f64_list("pi")?;
        let mut generators = Vec::with_capacity(k);
        for _ in 0..k {
            let (net, tail) = FlowNetwork::from_bytes(rest)?;
            generators.push(net);
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(PersistError::Invalid("trailing bytes after generators".into()));
        }
        let mut model = Self::from_parts(pi, generators).map_err(|e| PersistError::Invalid(e.to_string()))?;
        if model.dim() != m.usize("dim")? {
            return Err(PersistError::Invalid("dimension disagrees with manifest".into()));
        }
        model.meta = meta_entries(&lines);
        Ok(model)
    }
}

pub(crate) fn meta_entries(lines: &[String]) -> Vec<(String, String)> {
    lines
        .iter()
        .filter_map(|l| l.strip_prefix("meta."))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub(crate) fn check_simplex(pi: &[f64]) -> Result<()> {
    let s: f64 = pi.iter().sum();
    if pi.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(ModelError::InvalidModel(format!("prior {pi:?} is not on the simplex")));
    }
    Ok(())
}

impl EmModel for GenMM {
    fn dim(&self) -> usize {
        GenMM::dim(self)
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
        let bound = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let q = self.q_objective_on(&mut g, &bound, gamma, xv)?;
        let objective = g.scale(q, 1.0 / x.rows() as f64)?;
        g.backward(objective)?;
        let mut slot = 0;
        for (gen, vars) in self.generators.iter_mut().zip(&bound) {
            let params = gen.parameters_mut();
            let count = params.len();
            if let Some(vars) = vars {
                for (i, (p, v)) in params.into_iter().zip(vars).enumerate() {
                    let grad = g.grad(*v).expect("trainable leaf");
                    opt.ascend(slot + i, p, grad);
                }
            }
            slot += count;
        }
        Ok(())
    }

    fn log_likelihood(&self, x: &Tensor) -> Result<Vec<f64>> {
        GenMM::log_likelihood(self, x)
    }
}

/// Runs the EM trainer on an existing model.
pub fn train(model: &mut GenMM, data: &Dataset, config: &EmConfig) -> std::result::Result<TrainingLog, TrainFailure<GenMM>> {
    train_with(model, data, config, |_, _| {})
}

/// [`train`] with a per-epoch callback receiving the log record and current model.
pub fn train_with(
    model: &mut GenMM,
    data: &Dataset,
    config: &EmConfig,
    on_epoch: impl FnMut(&em::EpochRecord, &GenMM),
) -> std::result::Result<TrainingLog, TrainFailure<GenMM>> {
    let scaling = config.dim_scaling.resolve(model.dim());
    set_meta(&mut model.meta, "dim_scaling", &scaling.to_string());
    em::run_em(model, data, config, on_epoch)
}

pub(crate) fn set_meta(meta: &mut Vec<(String, String)>, key: &str, value: &str) {
    match meta.iter_mut().find(|(k, _)| k == key) {
        Some(entry) => entry.1 = value.to_string(),
        None => meta.push((key.to_string(), value.to_string())),
    }
}

/// Builds, initialises (per `config.init`) and trains a model from scratch.
pub fn fit(
    k: usize,
    flow: &FlowConfig,
    data: &Dataset,
    config: &EmConfig,
) -> std::result::Result<(GenMM, TrainingLog), TrainFailure<GenMM>> {
    fit_with(k, flow, data, config, |_, _| {})
}

pub fn fit_with(
    k: usize,
    flow: &FlowConfig,
    data: &Dataset,
    config: &EmConfig,
    on_epoch: impl FnMut(&em::EpochRecord, &GenMM),
) -> std::result::Result<(GenMM, TrainingLog), TrainFailure<GenMM>> {
    let mut model = match initialize(k, flow, data, config) {
        Ok(m) => m,
        Err(error) => {
            let placeholder = GenMM {
                pi: vec![1.0],
                generators: vec![FlowNetwork::identity(data.dim().max(1))],
                meta: Vec::new(),
            };
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

/// The untrained model [`fit`] starts from: seeded construction followed by
/// the initialisation selected in `config.init`.
pub fn initialize(k: usize, flow: &FlowConfig, data: &Dataset, config: &EmConfig) -> Result<GenMM> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GenMM::new(k, data.dim(), flow, &mut rng)?;
    if config.init == InitStrategy::DataDependent && !data.is_empty() {
        model.init_from_data(&data.samples, &mut rng);
    }
    set_meta(&mut model.meta, "init", config.init.name());
    Ok(model)
}
