//! The residual MLP noise predictor, in score or energy parameterisation.
//!
//! Both parameterisations share one network. A score model reads the network
//! output as `eps(x, t)`. An energy model reads it as `s(x, t)` and defines
//! `E(x, t) = |s(x, t)|^2`, with `eps = sigma_t * grad_x E`.

mod checkpoint;
mod inference;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adgraph::{Graph, NodeId, RealArray};
use crate::diffusion::NoiseSchedule;
use crate::{Error, Point, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parameterisation {
    Score,
    Energy,
}

impl Parameterisation {
    pub fn as_str(self) -> &'static str {
        match self {
            Parameterisation::Score => "score",
            Parameterisation::Energy => "energy",
        }
    }
}

impl fmt::Display for Parameterisation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Parameterisation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "score" => Ok(Parameterisation::Score),
            "energy" => Ok(Parameterisation::Energy),
            other => Err(Error::Config(format!("unknown parameterisation `{other}`"))),
        }
    }
}

/// Network dimensions. Defaults: 2 -> 128, four blocks with a 256-wide
/// interior, a 32-dim learnable time embedding and T = 100.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub inner: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub timesteps: usize,
    /// Whether the per-block time projection carries a bias.
    pub time_bias: bool,
    pub norm_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden: 128,
            inner: 256,
            blocks: 4,
            time_dim: 32,
            timesteps: 100,
            time_bias: true,
            norm_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("inner", self.inner),
            ("blocks", self.blocks),
            ("time_dim", self.time_dim),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("arch.{name} must be positive")));
            }
        }
        if self.input_dim != 2 {
            return Err(Error::Config("only 2D inputs are supported".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("arch.norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (d, h, i, e) = (self.input_dim, self.hidden, self.inner, self.time_dim);
        let mut out = vec![
            ("input.weight".to_string(), [d, h]),
            ("input.bias".to_string(), [1, h]),
        ];
        for b in 0..self.blocks {
            let p = format!("blocks.{b}");
            out.push((format!("{p}.norm.scale"), [1, h]));
            out.push((format!("{p}.norm.shift"), [1, h]));
            out.push((format!("{p}.lin1.weight"), [h, i]));
            out.push((format!("{p}.lin1.bias"), [1, i]));
            out.push((format!("{p}.time.weight"), [e, i]));
            if self.time_bias {
                out.push((format!("{p}.time.bias"), [1, i]));
            }
            out.push((format!("{p}.lin2.weight"), [i, i]));
            out.push((format!("{p}.lin2.bias"), [1, i]));
            out.push((format!("{p}.lin3.weight"), [i, h]));
            out.push((format!("{p}.lin3.bias"), [1, h]));
        }
        out.push(("output.weight".to_string(), [h, d]));
        out.push(("output.bias".to_string(), [1, d]));
        out.push(("time_embedding".to_string(), [self.timesteps + 1, e]));
        out
    }
}

/// Named parameter arrays in [`ArchConfig::layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Arc<RealArray>)>,
}

impl ParamSet {
    /// Builds a set from named arrays, checking names and shapes against `arch`.
    pub fn from_named(arch: &ArchConfig, mut named: Vec<(String, RealArray)>) -> Result<Self> {
        let layout = arch.layout();
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let pos = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Param(format!("missing parameter array `{name}`")))?;
            let (_, arr) = named.swap_remove(pos);
            if arr.shape() != shape.as_slice() {
                return Err(Error::Param(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    arr.shape(),
                    shape
                )));
            }
            entries.push((name.clone(), Arc::new(arr)));
        }
        if let Some((name, _)) = named.first() {
            return Err(Error::Param(format!("unexpected parameter array `{name}`")));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealArray)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a.as_ref()))
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RealArray> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, a)| Arc::make_mut(a))
    }

    pub(crate) fn shared(&self, index: usize) -> Arc<RealArray> {
        self.entries[index].1.clone()
    }

    pub(crate) fn array_mut(&mut self, index: usize) -> &mut RealArray {
        Arc::make_mut(&mut self.entries[index].1)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }
}

/// Fan-in scaled uniform weights (`+-1/sqrt(fan_in)`), zero biases, unit
/// norm scale. The time embedding table counts as fan-in 1.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    for (name, [rows, cols]) in arch.layout() {
        let arr = if name.ends_with(".weight") || name == "time_embedding" {
            let fan_in = if name == "time_embedding" { 1 } else { rows };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            RealArray::matrix(rows, cols, data)?
        } else if name.ends_with(".scale") {
            RealArray::filled(rows, cols, 1.0)
        } else {
            RealArray::zeros(rows, cols)
        };
        named.push((name, arr));
    }
    ParamSet::from_named(arch, named)
}

/// Output of one batched model evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub eps: Vec<Point>,
    /// `E(x, t)` per point, energy models only.
    pub energy: Option<Vec<f64>>,
}

/// Graph handles produced by [`DiffusionModel::build_eps`].
pub struct EpsGraph {
    pub x: NodeId,
    pub params: Vec<NodeId>,
    pub eps: NodeId,
    pub energy: Option<NodeId>,
}

/// Anything that predicts the noise for a batch at per-point steps.
pub trait NoisePredictor {
    fn predict_eps(
        &self,
        xs: &[Point],
        steps: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<Vec<Point>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub arch: ArchConfig,
    pub params: ParamSet,
    pub parameterisation: Parameterisation,
    /// Seed the parameters were initialised from.
    pub seed: u64,
}

impl DiffusionModel {
    pub fn new(arch: ArchConfig, parameterisation: Parameterisation, seed: u64) -> Result<Self> {
        let params = init_params(&arch, seed)?;
        Ok(Self {
            arch,
            params,
            parameterisation,
            seed,
        })
    }

    pub fn from_params(
        arch: ArchConfig,
        params: ParamSet,
        parameterisation: Parameterisation,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        // re-validate names and shapes
        let named = params
            .iter()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect();
        let params = ParamSet::from_named(&arch, named)?;
        Ok(Self {
            arch,
            params,
            parameterisation,
            seed,
        })
    }

    fn check_steps(&self, steps: &[usize]) -> Result<()> {
        for &t in steps {
            if t > self.arch.timesteps {
                return Err(Error::StepOutOfRange {
                    t,
                    steps: self.arch.timesteps,
                });
            }
        }
        Ok(())
    }

    /// Records the network on `g`. Returns the output node and the parameter
    /// leaves in layout order.
    pub fn build_network(
        &self,
        g: &mut Graph,
        x: NodeId,
        steps: Arc<Vec<usize>>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_steps(&steps)?;
        let params: Vec<NodeId> = (0..self.params.len())
            .map(|i| g.input_shared(self.params.shared(i)))
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("layout and parameter count agree");

        let (w_in, b_in) = (take(), take());
        let mut h = g.linear(x, w_in, Some(b_in))?;
        let mut block_params = Vec::with_capacity(self.arch.blocks);
        for _ in 0..self.arch.blocks {
            let scale = take();
            let shift = take();
            let w1 = take();
            let b1 = take();
            let wt = take();
            let bt = self.arch.time_bias.then(&mut take);
            let w2 = take();
            let b2 = take();
            let w3 = take();
            let b3 = take();
            block_params.push((scale, shift, w1, b1, wt, bt, w2, b2, w3, b3));
        }
        let (w_out, b_out) = (take(), take());
        let table = take();
        let emb = g.embedding(table, steps)?;

        for (scale, shift, w1, b1, wt, bt, w2, b2, w3, b3) in block_params {
            let normed = g.layer_norm(h, scale, shift, self.arch.norm_eps)?;
            let a = g.silu(normed)?;
            let a = g.linear(a, w1, Some(b1))?;
            let temb = g.linear(emb, wt, bt)?;
            let a = g.add(a, temb)?;
            let a = g.silu(a)?;
            let a = g.linear(a, w2, Some(b2))?;
            let a = g.silu(a)?;
            let a = g.linear(a, w3, Some(b3))?;
            h = g.add(h, a)?;
        }
        let out = g.linear(h, w_out, Some(b_out))?;
        Ok((out, params))
    }

    /// Records `eps(x, t)` on `g` for a batch at per-row steps. For energy
    /// models the energy node is returned too and `eps` is a differentiable
    /// input-gradient node (so parameter gradients of anything built from it
    /// are second-order correct).
    pub fn build_eps(
        &self,
        g: &mut Graph,
        xs: &[Point],
        steps: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<EpsGraph> {
        if steps.len() != xs.len() {
            return Err(Error::Config(format!(
                "{} steps for {} points",
                steps.len(),
                xs.len()
            )));
        }
        let x = g.input(points_to_array(xs));
        let (net, params) = self.build_network(g, x, Arc::new(steps.to_vec()))?;
        match self.parameterisation {
            Parameterisation::Score => Ok(EpsGraph {
                x,
                params,
                eps: net,
                energy: None,
            }),
            Parameterisation::Energy => {
                let per_row = g.row_sum_of_squares(net)?;
                let total = g.sum_all(per_row)?;
                let grad = g.input_gradient(total, x)?;
                let sig = steps.iter().map(|&t| schedule.sigma(t)).collect::<Vec<_>>();
                let sig = g.constant(RealArray::matrix(xs.len(), 1, sig)?);
                let eps = g.mul(grad, sig)?;
                Ok(EpsGraph {
                    x,
                    params,
                    eps,
                    energy: Some(per_row),
                })
            }
        }
    }

    /// Raw network output: `eps` for score models, `s` for energy models.
    pub fn net_forward(&self, xs: &[Point], t: usize) -> Result<Vec<Point>> {
        let mut g = Graph::new();
        let x = g.input(points_to_array(xs));
        let (out, _) = self.build_network(&mut g, x, Arc::new(vec![t; xs.len()]))?;
        Ok(array_to_points(g.value(out)))
    }

    /// `E(x, t) = |s(x, t)|^2`.
    pub fn energy_value(&self, xs: &[Point], t: usize) -> Result<Vec<f64>> {
        self.require_energy()?;
        let s = self.net_forward(xs, t)?;
        Ok(s.iter().map(|p| p[0] * p[0] + p[1] * p[1]).collect())
    }

    fn require_energy(&self) -> Result<()> {
        if self.parameterisation != Parameterisation::Energy {
            return Err(Error::WrongParameterisation {
                expected: Parameterisation::Energy,
                found: self.parameterisation,
            });
        }
        Ok(())
    }

    /// Noise prediction at a shared step; the implied score is `-eps/sigma_t`.
    pub fn model_eps(
        &self,
        xs: &[Point],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<Point>> {
        Ok(self.evaluate(xs, t, schedule)?.eps)
    }

    /// Noise prediction plus, for energy models, the energies.
    pub fn evaluate(
        &self,
        xs: &[Point],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ModelOutput> {
        self.check_steps(&[t])?;
        if schedule.steps() != self.arch.timesteps {
            return Err(Error::ScheduleMismatch(format!(
                "model has T={} but schedule has T={}",
                self.arch.timesteps,
                schedule.steps()
            )));
        }
        let (eps, energy) = self.evaluate_fast(xs, t, schedule.sigma(t))?;
        Ok(ModelOutput { eps, energy })
    }

    /// [`DiffusionModel::evaluate`] through the differentiable graph.
    pub fn evaluate_graph(
        &self,
        xs: &[Point],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ModelOutput> {
        self.check_steps(&[t])?;
        let mut g = Graph::new();
        let built = self.build_eps(&mut g, xs, &vec![t; xs.len()], schedule)?;
        Ok(ModelOutput {
            eps: array_to_points(g.value(built.eps)),
            energy: built.energy.map(|e| g.value(e).data().to_vec()),
        })
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict_eps(
        &self,
        xs: &[Point],
        steps: &[usize],
        schedule: &NoiseSchedule,
    ) -> Result<Vec<Point>> {
        let mut g = Graph::new();
        let built = self.build_eps(&mut g, xs, steps, schedule)?;
        Ok(array_to_points(g.value(built.eps)))
    }
}

pub(crate) fn points_to_array(xs: &[Point]) -> RealArray {
    let data = xs.iter().flat_map(|p| [p[0], p[1]]).collect();
    RealArray::matrix(xs.len(), 2, data).expect("two columns per point")
}

pub(crate) fn array_to_points(a: &RealArray) -> Vec<Point> {
    a.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}
