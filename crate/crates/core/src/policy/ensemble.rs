use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dims::*;
use super::routing::{aggregate, route, route_backward, GateView, RouterMode};
use super::PolicyError;
use crate::nn::{Activation, DenseNet, ForwardCache};
use crate::seed;

/// Position of the object angular velocity inside `e_phys`.
const OMEGA_SLOT: Range<usize> = 16..19;
/// Angular velocity reaches tens of rad/s while every other physical input is
/// O(1); it is rescaled before entering the encoder.
pub const OMEGA_INPUT_SCALE: f64 = 0.1;

/// Layer widths of every network in the stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub base_hidden: Vec<usize>,
    /// Hidden widths of the point-cloud encoder; its output layer is always 32 wide.
    pub mu_pc_hidden: Vec<usize>,
    pub mu_e_hidden: Vec<usize>,
    pub gate_hidden: usize,
    /// 19, or 23 when the physical state is zero-padded.
    pub phys_dim: usize,
    pub init_log_std: f64,
    /// Init gain of each network's last layer.
    pub output_gain: f64,
}

impl Architecture {
    /// Widths from the published architecture (512-512 policy, 32-32-32 point-cloud
    /// encoder, 256-128 object encoder, 64-unit gate).
    pub fn paper() -> Self {
        Self {
            base_hidden: vec![512, 512],
            mu_pc_hidden: vec![32, 32],
            mu_e_hidden: vec![256, 128],
            gate_hidden: 64,
            phys_dim: PHYS_DIM,
            init_log_std: 0.0,
            output_gain: 0.01,
        }
    }

    /// Same topology with narrower layers, for single-core runs.
    pub fn desk() -> Self {
        Self {
            base_hidden: vec![64, 64],
            mu_pc_hidden: vec![32, 32],
            mu_e_hidden: vec![64, 64],
            ..Self::paper()
        }
    }

    fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut d = Vec::with_capacity(hidden.len() + 2);
        d.push(input);
        d.extend_from_slice(hidden);
        d.push(output);
        d
    }
}

/// A Gaussian policy head: the shared trunk emits the action mean and the value.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub net: DenseNet,
    pub log_std: Vec<f64>,
}

impl PolicyNet {
    fn new(arch: &Architecture, seed: u64) -> Result<Self, PolicyError> {
        let dims = Architecture::dims(POLICY_INPUT_DIM, &arch.base_hidden, POLICY_OUTPUT_DIM);
        let mut net = DenseNet::mlp(&dims, Activation::Elu, Activation::Identity)?;
        net.init_scaled_uniform(seed, arch.output_gain);
        Ok(Self { net, log_std: vec![arch.init_log_std; NUM_JOINTS] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Component {
    MuPc,
    MuE,
    Base,
    Expert(usize),
    Gate,
}

/// One contiguous parameter tensor of the ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorId {
    MuPc,
    MuE,
    BaseNet,
    BaseLogStd,
    ExpertNet(usize),
    ExpertLogStd(usize),
    Gate,
}

impl TensorId {
    pub fn name(&self) -> String {
        match self {
            TensorId::MuPc => "mu_pc".into(),
            TensorId::MuE => "mu_e".into(),
            TensorId::BaseNet => "base.net".into(),
            TensorId::BaseLogStd => "base.log_std".into(),
            TensorId::ExpertNet(i) => format!("expert.{i}.net"),
            TensorId::ExpertLogStd(i) => format!("expert.{i}.log_std"),
            TensorId::Gate => "gate".into(),
        }
    }

    pub fn component(&self) -> Component {
        match *self {
            TensorId::MuPc => Component::MuPc,
            TensorId::MuE => Component::MuE,
            TensorId::BaseNet | TensorId::BaseLogStd => Component::Base,
            TensorId::ExpertNet(i) | TensorId::ExpertLogStd(i) => Component::Expert(i),
            TensorId::Gate => Component::Gate,
        }
    }
}

impl Component {
    pub fn tensors(&self) -> Vec<TensorId> {
        match *self {
            Component::MuPc => vec![TensorId::MuPc],
            Component::MuE => vec![TensorId::MuE],
            Component::Base => vec![TensorId::BaseNet, TensorId::BaseLogStd],
            Component::Expert(i) => vec![TensorId::ExpertNet(i), TensorId::ExpertLogStd(i)],
            Component::Gate => vec![TensorId::Gate],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyMode {
    Base,
    Expert(usize),
    Moe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDescriptor {
    /// `f_t = μ_pc(p_t)`
    pub pc_embedding: Vec<f64>,
    pub category: usize,
    /// `[f_t, onehot(category)]`
    pub e_shape: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
    /// Routing weights in MoE mode.
    pub gate_weights: Option<Vec<f64>>,
}

/// Raw per-step inputs, before any encoder runs.
#[derive(Clone, Copy, Debug)]
pub struct PolicyInput<'a> {
    pub obs: &'a [f64],
    pub e_phys: &'a [f64],
    pub pc_feature: &'a [f64],
    pub category: usize,
}

/// Offsets of trainable tensors inside one flat gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct GradLayout {
    entries: Vec<(TensorId, Range<usize>)>,
    total: usize,
}

impl GradLayout {
    pub fn new(ensemble: &PolicyEnsemble, trainable: &BTreeSet<Component>) -> Self {
        let mut entries = Vec::new();
        let mut total = 0;
        for c in trainable {
            for t in c.tensors() {
                let len = ensemble.tensor(t).len();
                entries.push((t, total..total + len));
                total += len;
            }
        }
        Self { entries, total }
    }

    pub fn range(&self, t: TensorId) -> Option<Range<usize>> {
        self.entries.iter().find(|(id, _)| *id == t).map(|(_, r)| r.clone())
    }

    pub fn contains(&self, c: Component) -> bool {
        self.entries.iter().any(|(t, _)| t.component() == c)
    }

    pub fn entries(&self) -> &[(TensorId, Range<usize>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.total]
    }
}

/// Activation traces of one differentiable forward pass.
pub struct Trace {
    mu_pc: Option<ForwardCache>,
    mu_e: Option<ForwardCache>,
    head: HeadTrace,
}

enum HeadTrace {
    Single {
        expert: Option<usize>,
        cache: ForwardCache,
    },
    Moe {
        logits: Vec<f64>,
        weights: Vec<f64>,
        gate: ForwardCache,
        experts: Vec<(ForwardCache, Vec<f64>)>,
    },
}

/// The complete policy stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEnsemble {
    pub arch: Architecture,
    pub mu_pc: DenseNet,
    pub mu_e: DenseNet,
    pub base: PolicyNet,
    pub experts: Vec<PolicyNet>,
    pub gate: DenseNet,
    pub router: RouterMode,
    pub gate_view: GateView,
    pub frozen: BTreeSet<Component>,
}

impl PolicyEnsemble {
    /// Fresh ensemble. Experts start as copies of the base head.
    pub fn new(
        arch: Architecture,
        n_experts: usize,
        router: RouterMode,
        gate_view: GateView,
        seed: u64,
    ) -> Result<Self, PolicyError> {
        if arch.phys_dim != PHYS_DIM && arch.phys_dim != PHYS_DIM_PADDED {
            return Err(PolicyError::Dimension { what: "phys_dim", expected: PHYS_DIM, got: arch.phys_dim });
        }
        if n_experts == 0 {
            return Err(PolicyError::Routing("at least one expert is required".into()));
        }
        let mut mu_pc = DenseNet::mlp(
            &Architecture::dims(PC_FEATURE_DIM, &arch.mu_pc_hidden, PC_EMBED_DIM),
            Activation::Elu,
            Activation::Identity,
        )?;
        mu_pc.init_scaled_uniform(seed::derive(seed, &[seed::tag("mu_pc")]), 1.0);
        let mut mu_e = DenseNet::mlp(
            &Architecture::dims(arch.phys_dim + SHAPE_DIM, &arch.mu_e_hidden, Z_DIM),
            Activation::Elu,
            Activation::Identity,
        )?;
        mu_e.init_scaled_uniform(seed::derive(seed, &[seed::tag("mu_e")]), 1.0);
        let base = PolicyNet::new(&arch, seed::derive(seed, &[seed::tag("base")]))?;
        let gate = Self::fresh_gate(&arch, gate_view, n_experts, seed)?;
        let experts = vec![base.clone(); n_experts];
        let ens = Self {
            arch,
            mu_pc,
            mu_e,
            base,
            experts,
            gate,
            router,
            gate_view,
            frozen: BTreeSet::new(),
        };
        ens.validate_router()?;
        Ok(ens)
    }

    fn validate_router(&self) -> Result<(), PolicyError> {
        if let RouterMode::TopK(k) = self.router {
            if k == 0 || k > self.n_experts() {
                return Err(PolicyError::Routing(format!(
                    "top-k with k={k} over {} experts",
                    self.n_experts()
                )));
            }
        }
        Ok(())
    }

    fn fresh_gate(arch: &Architecture, view: GateView, n_experts: usize, seed: u64) -> Result<DenseNet, PolicyError> {
        let mut gate = DenseNet::mlp(&[view.dim(), arch.gate_hidden, n_experts], Activation::Elu, Activation::Identity)?;
        gate.init_scaled_uniform(seed::derive(seed, &[seed::tag("gate")]), arch.output_gain);
        Ok(gate)
    }

    /// Replaces the experts with `n_experts` copies of the base head and the gate
    /// with a freshly initialized one for `view`. Encoders and base are kept.
    pub fn reset_moe(
        &mut self,
        n_experts: usize,
        router: RouterMode,
        view: GateView,
        seed: u64,
    ) -> Result<(), PolicyError> {
        if n_experts == 0 {
            return Err(PolicyError::Routing("at least one expert is required".into()));
        }
        let gate = Self::fresh_gate(&self.arch, view, n_experts, seed)?;
        let prev = (std::mem::take(&mut self.experts), self.router);
        self.experts = vec![self.base.clone(); n_experts];
        self.router = router;
        if let Err(e) = self.validate_router() {
            (self.experts, self.router) = prev;
            return Err(e);
        }
        self.gate = gate;
        self.gate_view = view;
        Ok(())
    }

    /// Fresh gate for `view`, initialized exactly as [`PolicyEnsemble::new`] would.
    pub fn reset_gate(&mut self, view: GateView, seed: u64) -> Result<(), PolicyError> {
        self.gate = Self::fresh_gate(&self.arch, view, self.n_experts(), seed)?;
        self.gate_view = view;
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Re-initializes every expert with the base head's parameters.
    pub fn experts_from_base(&mut self) {
        for e in &mut self.experts {
            *e = self.base.clone();
        }
    }

    pub fn set_router(&mut self, router: RouterMode) -> Result<(), PolicyError> {
        let prev = self.router;
        self.router = router;
        self.validate_router().inspect_err(|_| self.router = prev)
    }

    pub fn components(&self) -> Vec<Component> {
        let mut c = vec![Component::MuPc, Component::MuE, Component::Base];
        c.extend((0..self.n_experts()).map(Component::Expert));
        c.push(Component::Gate);
        c
    }

    pub fn tensor_ids(&self) -> Vec<TensorId> {
        self.components().iter().flat_map(Component::tensors).collect()
    }

    pub fn tensor(&self, t: TensorId) -> &[f64] {
        match t {
            TensorId::MuPc => self.mu_pc.params(),
            TensorId::MuE => self.mu_e.params(),
            TensorId::BaseNet => self.base.net.params(),
            TensorId::BaseLogStd => &self.base.log_std,
            TensorId::ExpertNet(i) => self.experts[i].net.params(),
            TensorId::ExpertLogStd(i) => &self.experts[i].log_std,
            TensorId::Gate => self.gate.params(),
        }
    }

    pub fn tensor_mut(&mut self, t: TensorId) -> &mut [f64] {
        match t {
            TensorId::MuPc => self.mu_pc.params_mut(),
            TensorId::MuE => self.mu_e.params_mut(),
            TensorId::BaseNet => self.base.net.params_mut(),
            TensorId::BaseLogStd => &mut self.base.log_std,
            TensorId::ExpertNet(i) => self.experts[i].net.params_mut(),
            TensorId::ExpertLogStd(i) => &mut self.experts[i].log_std,
            TensorId::Gate => self.gate.params_mut(),
        }
    }

    /// SHA-256 over the little-endian bytes of a component's parameters.
    pub fn fingerprint(&self, c: Component) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in c.tensors() {
            for v in self.tensor(t) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn head(&self, mode: PolicyMode) -> Result<&PolicyNet, PolicyError> {
        match mode {
            PolicyMode::Base => Ok(&self.base),
            PolicyMode::Expert(i) => self.experts.get(i).ok_or(PolicyError::UnknownExpert(i)),
            PolicyMode::Moe => unreachable!("moe has no single head"),
        }
    }

    pub fn encode_shape(&self, pc_feature: &[f64], category: usize) -> Result<ShapeDescriptor, PolicyError> {
        if category >= NUM_CATEGORIES {
            return Err(PolicyError::CategoryOutOfRange(category));
        }
        let pc_embedding = self.mu_pc.predict(pc_feature)?;
        Ok(Self::shape_from_embedding(pc_embedding, category))
    }

    fn shape_from_embedding(pc_embedding: Vec<f64>, category: usize) -> ShapeDescriptor {
        let mut e_shape = Vec::with_capacity(SHAPE_DIM);
        e_shape.extend_from_slice(&pc_embedding);
        e_shape.extend((0..NUM_CATEGORIES).map(|c| if c == category { 1.0 } else { 0.0 }));
        ShapeDescriptor { pc_embedding, category, e_shape }
    }

    fn privileged_input(&self, e_phys: &[f64], e_shape: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if e_phys.len() != self.arch.phys_dim {
            return Err(PolicyError::Dimension { what: "e_phys", expected: self.arch.phys_dim, got: e_phys.len() });
        }
        if e_shape.len() != SHAPE_DIM {
            return Err(PolicyError::Dimension { what: "e_shape", expected: SHAPE_DIM, got: e_shape.len() });
        }
        let mut e = Vec::with_capacity(self.arch.phys_dim + SHAPE_DIM);
        e.extend_from_slice(e_phys);
        for w in &mut e[OMEGA_SLOT] {
            *w *= OMEGA_INPUT_SCALE;
        }
        e.extend_from_slice(e_shape);
        Ok(e)
    }

    /// Extrinsics embedding `z_t = μ_e([e_phys, e_shape])`.
    pub fn encode_privileged(&self, e_phys: &[f64], e_shape: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let e = self.privileged_input(e_phys, e_shape)?;
        Ok(self.mu_e.predict(&e)?)
    }

    pub fn gate_logits(&self, gate_input: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if gate_input.len() != self.gate_view.dim() {
            return Err(PolicyError::Dimension {
                what: "gate input",
                expected: self.gate_view.dim(),
                got: gate_input.len(),
            });
        }
        Ok(self.gate.predict(gate_input)?)
    }

    /// Routing weights for the configured gate view of a shape descriptor.
    pub fn gate_route(&self, gate_input: &[f64]) -> Result<Vec<f64>, PolicyError> {
        route(&self.gate_logits(gate_input)?, self.router)
    }

    fn policy_input(obs: &[f64], z: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if obs.len() != OBS_DIM {
            return Err(PolicyError::Dimension { what: "observation", expected: OBS_DIM, got: obs.len() });
        }
        if z.len() != Z_DIM {
            return Err(PolicyError::Dimension { what: "z", expected: Z_DIM, got: z.len() });
        }
        let mut x = Vec::with_capacity(POLICY_INPUT_DIM);
        x.extend_from_slice(obs);
        x.extend_from_slice(z);
        Ok(x)
    }

    fn split_head(out: &[f64], log_std: &[f64]) -> PolicyOutput {
        PolicyOutput {
            mean: out[..NUM_JOINTS].to_vec(),
            log_std: log_std.to_vec(),
            value: out[NUM_JOINTS],
            gate_weights: None,
        }
    }

    /// Action mean, log-std and value for `(o_t, z_t)`. MoE mode additionally needs
    /// the shape descriptor for the gate.
    pub fn policy_forward(
        &self,
        obs: &[f64],
        z: &[f64],
        e_shape: &[f64],
        mode: PolicyMode,
    ) -> Result<PolicyOutput, PolicyError> {
        let x = Self::policy_input(obs, z)?;
        match mode {
            PolicyMode::Base | PolicyMode::Expert(_) => {
                let head = self.head(mode)?;
                let out = head.net.predict(&x)?;
                Ok(Self::split_head(&out, &head.log_std))
            }
            PolicyMode::Moe => {
                if e_shape.len() != SHAPE_DIM {
                    return Err(PolicyError::Dimension { what: "e_shape", expected: SHAPE_DIM, got: e_shape.len() });
                }
                let weights = self.gate_route(self.gate_view.select(e_shape))?;
                let mut outs = Vec::with_capacity(self.n_experts());
                for (e, &p) in self.experts.iter().zip(&weights) {
                    // zero-weight experts are skipped by `aggregate`
                    outs.push(if p == 0.0 { vec![0.0; POLICY_OUTPUT_DIM] } else { e.net.predict(&x)? });
                }
                let out_refs: Vec<&[f64]> = outs.iter().map(Vec::as_slice).collect();
                let combined = aggregate(&weights, &out_refs)?;
                let ls_refs: Vec<&[f64]> = self.experts.iter().map(|e| e.log_std.as_slice()).collect();
                let log_std = aggregate(&weights, &ls_refs)?;
                let mut out = Self::split_head(&combined, &log_std);
                out.gate_weights = Some(weights);
                Ok(out)
            }
        }
    }

    /// Runs both encoders and the selected head on raw inputs.
    pub fn act(&self, input: &PolicyInput<'_>, mode: PolicyMode) -> Result<PolicyOutput, PolicyError> {
        let shape = self.encode_shape(input.pc_feature, input.category)?;
        let z = self.encode_privileged(input.e_phys, &shape.e_shape)?;
        self.policy_forward(input.obs, &z, &shape.e_shape, mode)
    }

    /// Differentiable forward pass from raw inputs. With `encoders_frozen`, the
    /// precomputed `(e_shape, z)` are used instead of re-running the encoders.
    pub fn forward_trace(
        &self,
        input: &PolicyInput<'_>,
        precomputed: Option<(&[f64], &[f64])>,
        mode: PolicyMode,
    ) -> Result<(PolicyOutput, Trace), PolicyError> {
        let (e_shape, z, mu_pc, mu_e) = match precomputed {
            Some((e_shape, z)) => (e_shape.to_vec(), z.to_vec(), None, None),
            None => {
                if input.category >= NUM_CATEGORIES {
                    return Err(PolicyError::CategoryOutOfRange(input.category));
                }
                let (f, pc_cache) = self.mu_pc.forward(input.pc_feature)?;
                let shape = Self::shape_from_embedding(f, input.category);
                let e = self.privileged_input(input.e_phys, &shape.e_shape)?;
                let (z, e_cache) = self.mu_e.forward(&e)?;
                (shape.e_shape, z, Some(pc_cache), Some(e_cache))
            }
        };
        let x = Self::policy_input(input.obs, &z)?;
        let (out, head) = match mode {
            PolicyMode::Base | PolicyMode::Expert(_) => {
                let h = self.head(mode)?;
                let (y, cache) = h.net.forward(&x)?;
                let expert = match mode {
                    PolicyMode::Expert(i) => Some(i),
                    _ => None,
                };
                (Self::split_head(&y, &h.log_std), HeadTrace::Single { expert, cache })
            }
            PolicyMode::Moe => {
                let (logits, gate) = self.gate.forward(self.gate_view.select(&e_shape))?;
                let weights = route(&logits, self.router)?;
                let mut experts = Vec::with_capacity(self.n_experts());
                for e in &self.experts {
                    let (y, cache) = e.net.forward(&x)?;
                    experts.push((cache, y));
                }
                let out_refs: Vec<&[f64]> = experts.iter().map(|(_, y)| y.as_slice()).collect();
                let combined = aggregate(&weights, &out_refs)?;
                let ls_refs: Vec<&[f64]> = self.experts.iter().map(|e| e.log_std.as_slice()).collect();
                let log_std = aggregate(&weights, &ls_refs)?;
                let mut out = Self::split_head(&combined, &log_std);
                out.gate_weights = Some(weights.clone());
                (out, HeadTrace::Moe { logits, weights, gate, experts })
            }
        };
        Ok((out, Trace { mu_pc, mu_e, head }))
    }

    /// Accumulates into `grads` the gradient of `d_mean·mean + d_log_std·log_std +
    /// d_value·value` with respect to every tensor present in `layout`.
    pub fn backward(
        &self,
        trace: &Trace,
        d_mean: &[f64],
        d_log_std: &[f64],
        d_value: f64,
        layout: &GradLayout,
        grads: &mut [f64],
    ) -> Result<(), PolicyError> {
        let need_encoders = layout.contains(Component::MuE) || layout.contains(Component::MuPc);
        if need_encoders && trace.mu_e.is_none() {
            return Err(PolicyError::Frozen(Component::MuE));
        }
        let mut d_head_out = Vec::with_capacity(POLICY_OUTPUT_DIM);
        d_head_out.extend_from_slice(d_mean);
        d_head_out.push(d_value);

        let mut dz = vec![0.0; Z_DIM];
        let mut d_e_shape = vec![0.0; SHAPE_DIM];
        match &trace.head {
            HeadTrace::Single { expert, cache } => {
                let (net_id, ls_id, head) = match expert {
                    None => (TensorId::BaseNet, TensorId::BaseLogStd, &self.base),
                    Some(i) => (TensorId::ExpertNet(*i), TensorId::ExpertLogStd(*i), &self.experts[*i]),
                };
                let dx = Self::head_backward(head, cache, &d_head_out, layout, net_id, grads)?;
                if let Some(r) = layout.range(ls_id) {
                    for (g, d) in grads[r].iter_mut().zip(d_log_std) {
                        *g += d;
                    }
                }
                if need_encoders {
                    dz.copy_from_slice(&dx[OBS_DIM..]);
                }
            }
            HeadTrace::Moe { logits, weights, gate, experts } => {
                let d_weights: Vec<f64> = experts
                    .iter()
                    .zip(&self.experts)
                    .map(|((_, y), e)| {
                        let dm: f64 = d_mean.iter().zip(&y[..NUM_JOINTS]).map(|(a, b)| a * b).sum();
                        let dl: f64 = d_log_std.iter().zip(&e.log_std).map(|(a, b)| a * b).sum();
                        dm + dl + d_value * y[NUM_JOINTS]
                    })
                    .collect();
                let gate_range = layout.range(TensorId::Gate);
                let pc_needs_gate = layout.contains(Component::MuPc) && self.gate_view != GateView::Category;
                if gate_range.is_some() || pc_needs_gate {
                    let d_logits = route_backward(logits, weights, self.router, &d_weights);
                    let d_view =
                        self.gate.backward_into(gate, &d_logits, gate_range.map(|r| &mut grads[r]))?;
                    for (dst, v) in d_e_shape[self.gate_view.range()].iter_mut().zip(d_view) {
                        *dst += v;
                    }
                }
                for (i, ((cache, _), &p)) in experts.iter().zip(weights).enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let net_id = TensorId::ExpertNet(i);
                    if layout.range(net_id).is_some() || need_encoders {
                        let d_out: Vec<f64> = d_head_out.iter().map(|d| p * d).collect();
                        let dx = Self::head_backward(&self.experts[i], cache, &d_out, layout, net_id, grads)?;
                        if need_encoders {
                            for (a, b) in dz.iter_mut().zip(&dx[OBS_DIM..]) {
                                *a += b;
                            }
                        }
                    }
                    if let Some(r) = layout.range(TensorId::ExpertLogStd(i)) {
                        for (g, d) in grads[r].iter_mut().zip(d_log_std) {
                            *g += p * d;
                        }
                    }
                }
            }
        }
        if need_encoders {
            let e_cache = trace.mu_e.as_ref().expect("checked above");
            let d_e = self.mu_e.backward_into(e_cache, &dz, layout.range(TensorId::MuE).map(|r| &mut grads[r]))?;
            for (dst, v) in d_e_shape.iter_mut().zip(&d_e[self.arch.phys_dim..]) {
                *dst += v;
            }
            if let Some(r) = layout.range(TensorId::MuPc) {
                let pc_cache = trace.mu_pc.as_ref().expect("encoders traced together");
                self.mu_pc.backward_into(pc_cache, &d_e_shape[..PC_EMBED_DIM], Some(&mut grads[r]))?;
            }
        }
        Ok(())
    }

    fn head_backward(
        head: &PolicyNet,
        cache: &ForwardCache,
        d_out: &[f64],
        layout: &GradLayout,
        net_id: TensorId,
        grads: &mut [f64],
    ) -> Result<Vec<f64>, PolicyError> {
        let slot = layout.range(net_id).map(|r| &mut grads[r]);
        Ok(head.net.backward_into(cache, d_out, slot)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            base_hidden: vec![8, 8],
            mu_pc_hidden: vec![6],
            mu_e_hidden: vec![10],
            gate_hidden: 5,
            phys_dim: PHYS_DIM,
            init_log_std: -0.3,
            output_gain: 0.5,
        }
    }

    fn randomize(ens: &mut PolicyEnsemble, seed: u64) {
        let mut rng = seed::rng(seed, &[7]);
        for t in ens.tensor_ids() {
            for v in ens.tensor_mut(t) {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_encoder_shape_descriptor() {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 2, RouterMode::Soft, GateView::Full, 1).unwrap();
        ens.mu_pc.params_mut().fill(0.0);
        let s = ens.encode_shape(&[0.7; PC_FEATURE_DIM], 0).unwrap();
        let mut expected = vec![0.0; 32];
        expected.extend([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.e_shape, expected);
        assert!(matches!(ens.encode_shape(&[0.0; 100], 6), Err(PolicyError::CategoryOutOfRange(6))));
    }

    #[test]
    fn privileged_lengths_and_zero_encoder() {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 1, RouterMode::Soft, GateView::Full, 1).unwrap();
        let z = ens.encode_privileged(&[0.3; PHYS_DIM], &[0.1; SHAPE_DIM]).unwrap();
        assert_eq!(z.len(), Z_DIM);
        ens.mu_e.params_mut().fill(0.0);
        assert_eq!(ens.encode_privileged(&[0.3; PHYS_DIM], &[0.1; SHAPE_DIM]).unwrap(), vec![0.0; Z_DIM]);
        assert!(ens.encode_privileged(&[0.3; 18], &[0.1; SHAPE_DIM]).is_err());
    }

    #[test]
    fn reset_moe_matches_fresh_layout() {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 2, RouterMode::Soft, GateView::Full, 9).unwrap();
        randomize(&mut ens, 2);
        ens.reset_moe(3, RouterMode::Switch, GateView::Pc, 9).unwrap();
        let fresh = PolicyEnsemble::new(tiny_arch(), 3, RouterMode::Switch, GateView::Pc, 9).unwrap();
        assert_eq!(ens.gate, fresh.gate);
        assert!(ens.experts.iter().all(|e| *e == ens.base));
        assert!(ens.reset_moe(2, RouterMode::TopK(3), GateView::Full, 9).is_err());
        assert_eq!(ens.n_experts(), 3);
        assert_eq!(ens.router, RouterMode::Switch);
    }

    #[test]
    fn zero_gate_soft_is_uniform() {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 4, RouterMode::Soft, GateView::Full, 3).unwrap();
        ens.gate.params_mut().fill(0.0);
        assert_eq!(ens.gate_route(&[0.5; 38]).unwrap(), vec![0.25; 4]);
        assert!(ens.gate_route(&[0.5; 32]).is_err());
    }

    #[test]
    fn single_expert_moe_equals_base_bitwise() {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 1, RouterMode::Soft, GateView::Full, 5).unwrap();
        randomize(&mut ens, 5);
        ens.experts_from_base();
        let mut rng = seed::rng(6, &[]);
        let obs = random_vec(&mut rng, OBS_DIM);
        let z = random_vec(&mut rng, Z_DIM);
        let e_shape = random_vec(&mut rng, SHAPE_DIM);
        let a = ens.policy_forward(&obs, &z, &e_shape, PolicyMode::Base).unwrap();
        let b = ens.policy_forward(&obs, &z, &e_shape, PolicyMode::Moe).unwrap();
        assert_eq!(b.gate_weights.as_deref(), Some(&[1.0][..]));
        for (x, y) in a.mean.iter().zip(&b.mean) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.log_std, b.log_std);
    }

    /// Finite-difference check of every tensor's gradient through the full stack.
    fn check_gradients(mode: PolicyMode, router: RouterMode, view: GateView, seed: u64) {
        let mut ens = PolicyEnsemble::new(tiny_arch(), 3, router, view, seed).unwrap();
        randomize(&mut ens, seed);
        let mut rng = seed::rng(seed, &[1]);
        let obs = random_vec(&mut rng, OBS_DIM);
        let e_phys = random_vec(&mut rng, PHYS_DIM);
        let pc = random_vec(&mut rng, PC_FEATURE_DIM);
        let dm = random_vec(&mut rng, NUM_JOINTS);
        let dl = random_vec(&mut rng, NUM_JOINTS);
        let dv: f64 = rng.gen_range(-1.0..1.0);
        let input = PolicyInput { obs: &obs, e_phys: &e_phys, pc_feature: &pc, category: 2 };
        let objective = |e: &PolicyEnsemble| -> f64 {
            let o = e.act(&input, mode).unwrap();
            let a: f64 = o.mean.iter().zip(&dm).map(|(x, y)| x * y).sum();
            let b: f64 = o.log_std.iter().zip(&dl).map(|(x, y)| x * y).sum();
            a + b + dv * o.value
        };
        let all: BTreeSet<Component> = ens.components().into_iter().collect();
        let layout = GradLayout::new(&ens, &all);
        let mut grads = layout.zeros();
        let (_, trace) = ens.forward_trace(&input, None, mode).unwrap();
        ens.backward(&trace, &dm, &dl, dv, &layout, &mut grads).unwrap();
        let h = 1e-6;
        for (t, range) in layout.entries().to_vec() {
            let analytic = &grads[range.clone()];
            let mut numeric = vec![0.0; range.len()];
            for k in 0..range.len() {
                let mut p = ens.clone();
                p.tensor_mut(t)[k] += h;
                let mut m = ens.clone();
                m.tensor_mut(t)[k] -= h;
                numeric[k] = (objective(&p) - objective(&m)) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            if scale > 1e-9 {
                assert!(diff / scale < 1e-5, "{mode:?} {router} {t:?}: rel err {}", diff / scale);
            } else {
                assert!(diff < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_base_mode() {
        check_gradients(PolicyMode::Base, RouterMode::Soft, GateView::Full, 11);
    }

    #[test]
    fn gradients_expert_mode() {
        check_gradients(PolicyMode::Expert(1), RouterMode::Soft, GateView::Full, 12);
    }

    #[test]
    fn gradients_moe_soft_and_topk() {
        check_gradients(PolicyMode::Moe, RouterMode::Soft, GateView::Full, 13);
        check_gradients(PolicyMode::Moe, RouterMode::TopK(2), GateView::Pc, 14);
    }
}
