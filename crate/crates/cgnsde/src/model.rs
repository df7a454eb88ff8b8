//! Structured models with conditionally linear hidden-state dependence.
//!
//! A model over an `N`-dimensional state splits the state into observed
//! components `u1` and unobserved components `u2` and constrains every term
//! of the drift to be at most linear in `u2`:
//!
//! ```text
//! du1 = [ f1(u1) + g1(u1) u2 ] dt + diag(sigma1) dW1
//! du2 = [ f2(u1) + g2(u1) u2 ] dt + diag(sigma2) dW2
//! ```
//!
//! Two kinds of terms contribute additively to the four slots `f1`, `g1`,
//! `f2`, `g2`:
//!
//! * **Knowledge terms** — constant, linear, or quadratic monomials of full
//!   state entries with one trainable coefficient each.  A term with one
//!   `u2` factor routes to a `g` slot (the coefficient multiplies its
//!   `u1`-only factor); a term with two `u2` factors would break the
//!   conditional linearity and is rejected.
//! * **Neural blocks** — small networks whose inputs are observed entries
//!   only.  A block may be *applied* at many sites (translate-invariant
//!   lattice models reuse one block everywhere); each application maps its
//!   scalar outputs either to an `f` slot entry or, paired with a `u2`
//!   factor, to a `g` slot entry.  All applications share the block's
//!   parameters, and gradients accumulate across applications automatically.
//!
//! Evaluation happens on the reverse-mode [`Tape`]: a [`TapeModel`] interns
//! the parameter vector once, and [`CgnModel::eval_slots`] /
//! [`CgnModel::full_drift`] record one evaluation.  The same code path with
//! tape truncation serves as the plain (gradient-free) evaluator, so both
//! modes produce bitwise identical values.

use crate::dynamics::Benchmark;
use crate::error::{Error, Result};
use crate::nn::{self, MlpSpec};
use crate::tape::{Mark, Tape, Var};
use serde::{Deserialize, Serialize};

/// Split of the full state into observed (`u1`) and unobserved (`u2`)
/// components, each listed as full-state indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatePartition {
    pub observed: Vec<usize>,
    pub unobserved: Vec<usize>,
}

impl StatePartition {
    /// Validates disjointness and coverage of `0..n`.
    pub fn new(observed: Vec<usize>, unobserved: Vec<usize>) -> Result<Self> {
        let n = observed.len() + unobserved.len();
        let mut seen = vec![false; n];
        for &i in observed.iter().chain(unobserved.iter()) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, dim: n });
            }
            if seen[i] {
                return Err(Error::Validation(format!(
                    "state index {i} appears twice in the partition"
                )));
            }
            seen[i] = true;
        }
        Ok(StatePartition {
            observed,
            unobserved,
        })
    }

    /// Full state dimension.
    pub fn n(&self) -> usize {
        self.observed.len() + self.unobserved.len()
    }

    /// Observed dimension.
    pub fn n1(&self) -> usize {
        self.observed.len()
    }

    /// Unobserved dimension.
    pub fn n2(&self) -> usize {
        self.unobserved.len()
    }

    /// Position of full-state index `i` within `observed`, if observed.
    pub fn obs_pos(&self, i: usize) -> Option<usize> {
        self.observed.iter().position(|&j| j == i)
    }

    /// Position of full-state index `i` within `unobserved`, if unobserved.
    pub fn unobs_pos(&self, i: usize) -> Option<usize> {
        self.unobserved.iter().position(|&j| j == i)
    }

    /// Extracts the observed components of a full state.
    pub fn split_observed(&self, state: &[f64]) -> Vec<f64> {
        self.observed.iter().map(|&i| state[i]).collect()
    }

    /// Extracts the unobserved components of a full state.
    pub fn split_unobserved(&self, state: &[f64]) -> Vec<f64> {
        self.unobserved.iter().map(|&i| state[i]).collect()
    }
}

/// A monomial in full-state entries: `1`, `x_j`, or `x_j x_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TermDescriptor {
    Constant,
    Linear(usize),
    Quadratic(usize, usize),
}

impl TermDescriptor {
    /// Canonical form: quadratic factor indices sorted ascending.
    pub fn normalized(self) -> Self {
        match self {
            TermDescriptor::Quadratic(j, k) if j > k => TermDescriptor::Quadratic(k, j),
            other => other,
        }
    }

    /// Largest referenced state index, if any.
    fn max_index(&self) -> Option<usize> {
        match *self {
            TermDescriptor::Constant => None,
            TermDescriptor::Linear(j) => Some(j),
            TermDescriptor::Quadratic(j, k) => Some(j.max(k)),
        }
    }

    /// Evaluates the monomial at a full state.
    pub fn eval(&self, state: &[f64]) -> f64 {
        match *self {
            TermDescriptor::Constant => 1.0,
            TermDescriptor::Linear(j) => state[j],
            TermDescriptor::Quadratic(j, k) => state[j] * state[k],
        }
    }

    /// Human-readable form, e.g. `1`, `x3`, `x1*x4` (zero-based indices).
    pub fn label(&self) -> String {
        match *self {
            TermDescriptor::Constant => "1".to_string(),
            TermDescriptor::Linear(j) => format!("x{j}"),
            TermDescriptor::Quadratic(j, k) => format!("x{j}*x{k}"),
        }
    }
}

/// One knowledge term: a monomial contributing to the drift of `row`,
/// scaled by trainable coefficient number `coeff`.
///
/// Several terms may reference the same coefficient; translate-invariant
/// lattice models use this to share one coefficient across all grid sites
/// of a role.  Gradients then accumulate over the sharing terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTerm {
    pub row: usize,
    pub desc: TermDescriptor,
    pub coeff: usize,
}

/// Destination of one scalar output of a neural block application: it adds
/// to the drift of `row`, multiplied by the unobserved entry `u2_factor` if
/// present (routing it to a `g` slot instead of an `f` slot).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRoute {
    pub row: usize,
    pub u2_factor: Option<usize>,
}

/// One application of a neural block: which observed entries feed it and
/// where its outputs go.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockApplication {
    /// Full-state indices (must be observed), in network-input order.
    pub inputs: Vec<usize>,
    /// One route per network output.
    pub outputs: Vec<OutputRoute>,
}

/// A neural network shared by one or more applications.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralBlock {
    pub spec: MlpSpec,
    pub apps: Vec<BlockApplication>,
}

/// How the `u1`-dependent factor of a compiled term is formed.
#[derive(Debug, Clone, Copy)]
enum PhiKind {
    /// Factor 1 (constant terms, and linear terms in a `u2` entry).
    One,
    /// One observed entry (position within `u1`).
    U1(usize),
    /// Product of two observed entries.
    U1U1(usize, usize),
}

/// Gather-and-scatter routing of a set of scalar values into one slot.
#[derive(Debug, Clone, Default)]
struct SlotRouting {
    /// Indices into the source value vector.
    ids: Vec<usize>,
    /// Flat destination positions within the slot tensor.
    pos: Vec<usize>,
}

impl SlotRouting {
    fn push(&mut self, id: usize, pos: usize) {
        self.ids.push(id);
        self.pos.push(pos);
    }
}

/// Per-application compiled routing.
#[derive(Debug, Clone)]
struct AppPlan {
    /// Positions within `u1` feeding the network, in input order.
    input_pos: Vec<usize>,
    f1: SlotRouting,
    g1: SlotRouting,
    f2: SlotRouting,
    g2: SlotRouting,
}

/// Precompiled evaluation plan for a model under its partition.
#[derive(Debug, Clone)]
struct ModelPlan {
    /// Term ids whose factor is constant 1.
    const_ids: Vec<usize>,
    /// Term ids with a single observed factor, plus that factor's position.
    lin_ids: Vec<usize>,
    lin_pos: Vec<usize>,
    /// Term ids with two observed factors, plus both positions.
    quad_ids: Vec<usize>,
    quad_pos_a: Vec<usize>,
    quad_pos_b: Vec<usize>,
    /// Coefficient number of every term, in term order.
    coeff_ids: Vec<usize>,
    /// Size of the coefficient pool.
    coeff_count: usize,
    /// Routing of coefficient*factor values into the four slots.
    term_f1: SlotRouting,
    term_g1: SlotRouting,
    term_f2: SlotRouting,
    term_g2: SlotRouting,
    /// Per block, per application.
    apps: Vec<Vec<AppPlan>>,
}

/// Slot variables of one drift evaluation.
#[derive(Debug, Clone, Copy)]
pub struct SlotVars {
    /// `N1 x 1`.
    pub f1: Var,
    /// `N1 x N2`.
    pub g1: Var,
    /// `N2 x 1`.
    pub f2: Var,
    /// `N2 x N2`.
    pub g2: Var,
}

/// A conditionally linear model: partition, terms, blocks, noise amplitudes,
/// and the flat parameter vector (the knowledge-coefficient pool first, then
/// each block's network parameters).
#[derive(Debug, Clone)]
pub struct CgnModel {
    pub partition: StatePartition,
    pub terms: Vec<KnowledgeTerm>,
    pub blocks: Vec<NeuralBlock>,
    /// Noise amplitudes over `u1`, ordered like `partition.observed`.
    pub sigma1: Vec<f64>,
    /// Noise amplitudes over `u2`, ordered like `partition.unobserved`.
    pub sigma2: Vec<f64>,
    pub params: Vec<f64>,
    plan: ModelPlan,
}

impl CgnModel {
    /// Builds and validates a model.  `params` may be empty, in which case
    /// all parameters start at zero.
    pub fn new(
        partition: StatePartition,
        terms: Vec<KnowledgeTerm>,
        blocks: Vec<NeuralBlock>,
        sigma1: Vec<f64>,
        sigma2: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let terms: Vec<KnowledgeTerm> = terms
            .into_iter()
            .map(|t| KnowledgeTerm {
                row: t.row,
                desc: t.desc.normalized(),
                coeff: t.coeff,
            })
            .collect();
        let plan = ModelPlan::compile(&partition, &terms, &blocks)?;
        if sigma1.len() != partition.n1() {
            return Err(Error::DimensionMismatch {
                context: "sigma1",
                expected: partition.n1(),
                got: sigma1.len(),
            });
        }
        if sigma2.len() != partition.n2() {
            return Err(Error::DimensionMismatch {
                context: "sigma2",
                expected: partition.n2(),
                got: sigma2.len(),
            });
        }
        if sigma1.iter().any(|s| *s <= 0.0) {
            return Err(Error::Validation(
                "observed-state noise amplitudes must be strictly positive".into(),
            ));
        }
        if sigma2.iter().any(|s| *s < 0.0) {
            return Err(Error::Validation(
                "unobserved-state noise amplitudes must be nonnegative".into(),
            ));
        }
        let expected = plan.coeff_count
            + blocks
                .iter()
                .map(|b| b.spec.param_count())
                .sum::<usize>();
        let params = if params.is_empty() {
            vec![0.0; expected]
        } else if params.len() == expected {
            params
        } else {
            return Err(Error::DimensionMismatch {
                context: "model params",
                expected,
                got: params.len(),
            });
        };
        Ok(CgnModel {
            partition,
            terms,
            blocks,
            sigma1,
            sigma2,
            params,
            plan,
        })
    }

    /// Same structure and noise amplitudes with a different parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        CgnModel::new(
            self.partition.clone(),
            self.terms.clone(),
            self.blocks.clone(),
            self.sigma1.clone(),
            self.sigma2.clone(),
            params,
        )
    }

    /// Same structure and parameters with different noise amplitudes.
    pub fn with_sigma(&self, sigma1: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        CgnModel::new(
            self.partition.clone(),
            self.terms.clone(),
            self.blocks.clone(),
            sigma1,
            sigma2,
            self.params.clone(),
        )
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Number of knowledge coefficients (they occupy `params[..k]`).
    pub fn coeff_count(&self) -> usize {
        self.plan.coeff_count
    }

    /// Parameter range of block `b`'s network.
    pub fn block_param_range(&self, b: usize) -> std::ops::Range<usize> {
        let mut off = self.plan.coeff_count;
        for blk in &self.blocks[..b] {
            off += blk.spec.param_count();
        }
        off..off + self.blocks[b].spec.param_count()
    }

    /// Interns the model's own parameters on a tape.
    pub fn intern(&self, tape: &mut Tape) -> TapeModel {
        self.intern_with_params(tape, &self.params)
    }

    /// Interns an explicit parameter vector (e.g. the optimizer's working
    /// copy) on a tape.  The parameter leaf is exposed so its adjoint can be
    /// read back after `backward`.
    pub fn intern_with_params(&self, tape: &mut Tape, params: &[f64]) -> TapeModel {
        assert_eq!(params.len(), self.param_count(), "wrong parameter count");
        let param_leaf = tape.leaf(params, params.len(), 1);
        let ones = if self.plan.const_ids.is_empty() {
            None
        } else {
            Some(tape.leaf(&vec![1.0; self.plan.const_ids.len()], self.plan.const_ids.len(), 1))
        };
        TapeModel { param_leaf, ones }
    }

    /// Records one evaluation of the four slots at the observed state `u1`
    /// (an `N1 x 1` tape variable).
    pub fn eval_slots(&self, tape: &mut Tape, tm: &TapeModel, u1: Var) -> SlotVars {
        assert_eq!(
            u1.shape(),
            (self.partition.n1(), 1),
            "observed state has wrong shape"
        );
        let (n1, n2) = (self.partition.n1(), self.partition.n2());
        let k = self.terms.len();
        let plan = &self.plan;

        // Coefficient * factor value for every knowledge term.
        let term_vals = if k > 0 {
            let mut pieces: Vec<(Var, Vec<usize>)> = Vec::new();
            if let Some(ones) = tm.ones {
                pieces.push((ones, plan.const_ids.clone()));
            }
            if !plan.lin_ids.is_empty() {
                let vals = tape.gather(u1, &plan.lin_pos);
                pieces.push((vals, plan.lin_ids.clone()));
            }
            if !plan.quad_ids.is_empty() {
                let a = tape.gather(u1, &plan.quad_pos_a);
                let b = tape.gather(u1, &plan.quad_pos_b);
                let prod = tape.mul(a, b);
                pieces.push((prod, plan.quad_ids.clone()));
            }
            let borrowed: Vec<(Var, &[usize])> =
                pieces.iter().map(|(v, p)| (*v, p.as_slice())).collect();
            let phi = tape.assemble(k, 1, &borrowed);
            let pool = tape.view(tm.param_leaf, 0, plan.coeff_count, 1);
            let coeffs = tape.gather(pool, &plan.coeff_ids);
            Some(tape.mul(coeffs, phi))
        } else {
            None
        };

        // Network outputs per block application.
        let mut app_outs: Vec<Vec<Var>> = Vec::with_capacity(self.blocks.len());
        let mut block_off = plan.coeff_count;
        for (b, block) in self.blocks.iter().enumerate() {
            let pview = tape.view(tm.param_leaf, block_off, block.spec.param_count(), 1);
            block_off += block.spec.param_count();
            let mut outs = Vec::with_capacity(block.apps.len());
            for app_plan in &plan.apps[b] {
                let input = tape.gather(u1, &app_plan.input_pos);
                outs.push(nn::mlp_forward_taped(tape, &block.spec, pview, input));
            }
            app_outs.push(outs);
        }

        let build_slot = |tape: &mut Tape,
                              rows: usize,
                              cols: usize,
                              term_route: &SlotRouting,
                              pick: &dyn Fn(&AppPlan) -> &SlotRouting|
         -> Var {
            let mut pieces: Vec<(Var, Vec<usize>)> = Vec::new();
            if !term_route.ids.is_empty() {
                let vals = term_vals.expect("terms routed but no term values");
                let picked = tape.gather(vals, &term_route.ids);
                pieces.push((picked, term_route.pos.clone()));
            }
            for (b, outs) in app_outs.iter().enumerate() {
                for (a, &out) in outs.iter().enumerate() {
                    let route = pick(&plan.apps[b][a]);
                    if !route.ids.is_empty() {
                        let picked = tape.gather(out, &route.ids);
                        pieces.push((picked, route.pos.clone()));
                    }
                }
            }
            let borrowed: Vec<(Var, &[usize])> =
                pieces.iter().map(|(v, p)| (*v, p.as_slice())).collect();
            tape.assemble(rows, cols, &borrowed)
        };

        let f1 = build_slot(tape, n1, 1, &plan.term_f1, &|a| &a.f1);
        let g1 = build_slot(tape, n1, n2, &plan.term_g1, &|a| &a.g1);
        let f2 = build_slot(tape, n2, 1, &plan.term_f2, &|a| &a.f2);
        let g2 = build_slot(tape, n2, n2, &plan.term_g2, &|a| &a.g2);
        SlotVars { f1, g1, f2, g2 }
    }

    /// Records the full-state drift `(f1 + g1 u2, f2 + g2 u2)` re-assembled
    /// into original index order; `state` is an `N x 1` tape variable.
    pub fn full_drift(&self, tape: &mut Tape, tm: &TapeModel, state: Var) -> Var {
        assert_eq!(
            state.shape(),
            (self.partition.n(), 1),
            "state has wrong shape"
        );
        let u1 = tape.gather(state, &self.partition.observed);
        let u2 = tape.gather(state, &self.partition.unobserved);
        let slots = self.eval_slots(tape, tm, u1);
        let du1 = if self.partition.n2() > 0 {
            let g1u2 = tape.matmul(slots.g1, u2);
            tape.add(slots.f1, g1u2)
        } else {
            slots.f1
        };
        let du2 = if self.partition.n2() > 0 {
            let g2u2 = tape.matmul(slots.g2, u2);
            tape.add(slots.f2, g2u2)
        } else {
            slots.f2
        };
        tape.assemble(
            self.partition.n(),
            1,
            &[
                (du1, &self.partition.observed),
                (du2, &self.partition.unobserved),
            ],
        )
    }

    /// Full-state noise amplitudes in original index order.
    pub fn full_sigma(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.partition.n()];
        for (p, &i) in self.partition.observed.iter().enumerate() {
            out[i] = self.sigma1[p];
        }
        for (p, &i) in self.partition.unobserved.iter().enumerate() {
            out[i] = self.sigma2[p];
        }
        out
    }
}

/// Hoisted tape handles of one interned model.
#[derive(Debug, Clone, Copy)]
pub struct TapeModel {
    /// Leaf holding the full parameter vector; read its adjoint after
    /// `backward` to obtain the gradient.
    pub param_leaf: Var,
    /// Leaf of ones feeding constant terms, if any.
    ones: Option<Var>,
}

impl ModelPlan {
    fn compile(
        partition: &StatePartition,
        terms: &[KnowledgeTerm],
        blocks: &[NeuralBlock],
    ) -> Result<ModelPlan> {
        let n = partition.n();
        let n2 = partition.n2();
        let mut plan = ModelPlan {
            const_ids: Vec::new(),
            lin_ids: Vec::new(),
            lin_pos: Vec::new(),
            quad_ids: Vec::new(),
            quad_pos_a: Vec::new(),
            quad_pos_b: Vec::new(),
            coeff_ids: terms.iter().map(|t| t.coeff).collect(),
            coeff_count: 0,
            term_f1: SlotRouting::default(),
            term_g1: SlotRouting::default(),
            term_f2: SlotRouting::default(),
            term_g2: SlotRouting::default(),
            apps: Vec::new(),
        };

        // Coefficient numbers must form a dense range so no parameter slot
        // is silently dead.
        if !terms.is_empty() {
            let max_id = plan.coeff_ids.iter().copied().max().unwrap();
            let mut used = vec![false; max_id + 1];
            for &id in &plan.coeff_ids {
                used[id] = true;
            }
            if let Some(unused) = used.iter().position(|u| !u) {
                return Err(Error::Validation(format!(
                    "coefficient {unused} is never referenced by any term \
                     (coefficient numbers must form a dense range)"
                )));
            }
            plan.coeff_count = max_id + 1;
        }

        for (id, term) in terms.iter().enumerate() {
            if term.row >= n {
                return Err(Error::IndexOutOfRange {
                    index: term.row,
                    dim: n,
                });
            }
            if let Some(max) = term.desc.max_index() {
                if max >= n {
                    return Err(Error::IndexOutOfRange { index: max, dim: n });
                }
            }
            // Split the monomial into its u1-only factor and at most one u2
            // factor.
            let (phi, u2_factor): (PhiKind, Option<usize>) = match term.desc {
                TermDescriptor::Constant => (PhiKind::One, None),
                TermDescriptor::Linear(j) => match partition.obs_pos(j) {
                    Some(p) => (PhiKind::U1(p), None),
                    None => (PhiKind::One, Some(j)),
                },
                TermDescriptor::Quadratic(j, k) => {
                    match (partition.obs_pos(j), partition.obs_pos(k)) {
                        (Some(pj), Some(pk)) => (PhiKind::U1U1(pj, pk), None),
                        (Some(pj), None) => (PhiKind::U1(pj), Some(k)),
                        (None, Some(pk)) => (PhiKind::U1(pk), Some(j)),
                        (None, None) => {
                            return Err(Error::Validation(format!(
                                "term {} in row {} multiplies two unobserved entries, \
                                 which breaks the conditionally linear structure",
                                term.desc.label(),
                                term.row
                            )));
                        }
                    }
                }
            };
            match phi {
                PhiKind::One => plan.const_ids.push(id),
                PhiKind::U1(p) => {
                    plan.lin_ids.push(id);
                    plan.lin_pos.push(p);
                }
                PhiKind::U1U1(p, q) => {
                    plan.quad_ids.push(id);
                    plan.quad_pos_a.push(p);
                    plan.quad_pos_b.push(q);
                }
            }
            route(partition, term.row, u2_factor, id, n2, &mut plan.term_f1, &mut plan.term_g1, &mut plan.term_f2, &mut plan.term_g2)?;
        }

        for block in blocks {
            if block.apps.is_empty() {
                return Err(Error::Validation(
                    "neural block has no applications".into(),
                ));
            }
            let mut app_plans = Vec::with_capacity(block.apps.len());
            for app in &block.apps {
                if app.inputs.len() != block.spec.input_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "block application inputs",
                        expected: block.spec.input_dim(),
                        got: app.inputs.len(),
                    });
                }
                if app.outputs.len() != block.spec.output_dim() {
                    return Err(Error::DimensionMismatch {
                        context: "block application outputs",
                        expected: block.spec.output_dim(),
                        got: app.outputs.len(),
                    });
                }
                let mut input_pos = Vec::with_capacity(app.inputs.len());
                for &i in &app.inputs {
                    match partition.obs_pos(i) {
                        Some(p) => input_pos.push(p),
                        None => {
                            return Err(Error::Validation(format!(
                                "network input x{i} is not an observed entry; hidden-state \
                                 inputs would break the conditionally Gaussian structure"
                            )));
                        }
                    }
                }
                let mut ap = AppPlan {
                    input_pos,
                    f1: SlotRouting::default(),
                    g1: SlotRouting::default(),
                    f2: SlotRouting::default(),
                    g2: SlotRouting::default(),
                };
                for (o, routed) in app.outputs.iter().enumerate() {
                    if routed.row >= n {
                        return Err(Error::IndexOutOfRange {
                            index: routed.row,
                            dim: n,
                        });
                    }
                    route(partition, routed.row, routed.u2_factor, o, n2, &mut ap.f1, &mut ap.g1, &mut ap.f2, &mut ap.g2)?;
                }
                app_plans.push(ap);
            }
            plan.apps.push(app_plans);
        }
        Ok(plan)
    }
}

/// Routes value `id` into the slot determined by (`row`, `u2_factor`).
#[allow(clippy::too_many_arguments)]
fn route(
    partition: &StatePartition,
    row: usize,
    u2_factor: Option<usize>,
    id: usize,
    n2: usize,
    f1: &mut SlotRouting,
    g1: &mut SlotRouting,
    f2: &mut SlotRouting,
    g2: &mut SlotRouting,
) -> Result<()> {
    let col = match u2_factor {
        None => None,
        Some(j) => match partition.unobs_pos(j) {
            Some(c) => Some(c),
            None => {
                return Err(Error::Validation(format!(
                    "coupling factor x{j} is not an unobserved entry"
                )));
            }
        },
    };
    match (partition.obs_pos(row), partition.unobs_pos(row)) {
        (Some(r), None) => match col {
            None => f1.push(id, r),
            Some(c) => g1.push(id, r * n2 + c),
        },
        (None, Some(r)) => match col {
            None => f2.push(id, r),
            Some(c) => g2.push(id, r * n2 + c),
        },
        _ => unreachable!("partition covers every index exactly once"),
    }
    Ok(())
}

/// Reusable gradient-free evaluator: wraps a private tape and truncates it
/// after every call, so repeated evaluation costs no growing memory while
/// remaining bitwise identical to recorded evaluation.
pub struct ModelEvaluator<'m> {
    model: &'m CgnModel,
    tape: Tape,
    tm: TapeModel,
    base: Mark,
}

impl<'m> ModelEvaluator<'m> {
    pub fn new(model: &'m CgnModel) -> Self {
        let mut tape = Tape::new();
        let tm = model.intern(&mut tape);
        let base = tape.mark();
        ModelEvaluator {
            model,
            tape,
            tm,
            base,
        }
    }

    /// Full-state drift at `state`, written into `out`.
    pub fn drift(&mut self, state: &[f64], out: &mut [f64]) {
        let s = self.tape.leaf(state, state.len(), 1);
        let d = self.model.full_drift(&mut self.tape, &self.tm, s);
        out.copy_from_slice(self.tape.read(d));
        self.tape.truncate(self.base);
    }

    /// Slot values at the observed state `u1`, as owned buffers
    /// `(f1, g1, f2, g2)`.
    pub fn slots(&mut self, u1: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let v = self.tape.leaf(u1, u1.len(), 1);
        let s = self.model.eval_slots(&mut self.tape, &self.tm, v);
        let out = (
            self.tape.read(s.f1).to_vec(),
            self.tape.read(s.g1).to_vec(),
            self.tape.read(s.f2).to_vec(),
            self.tape.read(s.g2).to_vec(),
        );
        self.tape.truncate(self.base);
        out
    }
}

/// Knowledge terms of a benchmark's exact drift, as full-state monomials.
///
/// The coefficient values are returned alongside so that
/// [`true_model`] can assemble an exact replica.
pub fn benchmark_terms(bench: &Benchmark) -> (Vec<KnowledgeTerm>, Vec<f64>) {
    use TermDescriptor::{Constant, Linear, Quadratic};
    let mut terms: Vec<KnowledgeTerm> = Vec::new();
    let mut coeffs = Vec::new();
    let mut push = |row: usize, desc: TermDescriptor, c: f64| {
        terms.push(KnowledgeTerm {
            row,
            desc,
            coeff: terms.len(),
        });
        coeffs.push(c);
    };
    match bench {
        Benchmark::Lorenz84 => {
            // dx = -(y^2+z^2) - a(x-f);  a = 1/4, af = 2.
            push(0, Constant, 2.0);
            push(0, Linear(0), -0.25);
            push(0, Quadratic(1, 1), -1.0);
            push(0, Quadratic(2, 2), -1.0);
            // dy = -b xz + xy - y + g;  b = 4, g = 1.
            push(1, Constant, 1.0);
            push(1, Linear(1), -1.0);
            push(1, Quadratic(0, 2), -4.0);
            push(1, Quadratic(0, 1), 1.0);
            // dz = b xy + xz - z.
            push(2, Linear(2), -1.0);
            push(2, Quadratic(0, 1), 4.0);
            push(2, Quadratic(0, 2), 1.0);
        }
        Benchmark::Psbse => {
            // dx = bx x + a xy + a yz; dy = by y - a x^2 + 2a xz;
            // dz = bz z - 3a xy;  a = 5.
            push(0, Linear(0), 0.2);
            push(0, Quadratic(0, 1), 5.0);
            push(0, Quadratic(1, 2), 5.0);
            push(1, Linear(1), -0.3);
            push(1, Quadratic(0, 0), -5.0);
            push(1, Quadratic(0, 2), 10.0);
            push(2, Linear(2), -0.5);
            push(2, Quadratic(0, 1), -15.0);
        }
        Benchmark::Lorenz96 { size, .. } => {
            let n = *size;
            for i in 0..n {
                // dx_i = (x_{i+1} - x_{i-2}) x_{i-1} - c_i x_i + F.
                push(i, Constant, 8.0);
                push(i, Linear(i), -bench.l96_damping(i));
                push(i, Quadratic((i + n - 1) % n, (i + 1) % n), 1.0);
                push(i, Quadratic((i + n - 2) % n, (i + n - 1) % n), -1.0);
            }
        }
    }
    (terms, coeffs)
}

/// Exact benchmark dynamics expressed as a conditionally linear model under
/// `partition`.  Fails with a validation error if the benchmark is *not*
/// conditionally linear under that partition (e.g. a quadratic coupling of
/// two unobserved entries).
pub fn true_model(bench: &Benchmark, partition: StatePartition) -> Result<CgnModel> {
    let (terms, coeffs) = benchmark_terms(bench);
    let sigma = bench.sigma();
    let sigma1 = partition.observed.iter().map(|&i| sigma[i]).collect();
    let sigma2 = partition.unobserved.iter().map(|&i| sigma[i]).collect();
    CgnModel::new(partition, terms, Vec::new(), sigma1, sigma2, coeffs)
}
