//! Forward passes over the looped architecture.
//!
//! Inference runs one small graph per recurrent step (constants only), so
//! memory stays flat in T. Training builds one differentiated graph holding
//! the prelude, the final k grad steps, and the coda; the n-step no-grad
//! prefix runs in throwaway inference graphs and re-enters the main graph as
//! a constant, so no gradient can leak out of truncated steps.

use super::{BlockLayout, InjectLayout, Model, ModelError};
use crate::tensor::{self, FlopCount, Graph, Tensor, TensorError, Var};

/// Loop diagnostics: per-step state norms and residual jumps.
#[derive(Debug, Clone)]
pub struct LoopState {
    /// Number of recurrent steps taken.
    pub t: u32,
    /// ||h_t|| for t = 0..=T.
    pub state_norms: Vec<f64>,
    /// ||h_t - h_{t-1}|| for t = 1..=T.
    pub residuals: Vec<f64>,
    /// h_T.
    pub final_state: Tensor,
}

struct LoopTrace {
    state_norms: Vec<f64>,
    residuals: Vec<f64>,
}

impl LoopTrace {
    fn new(h0: &Tensor) -> Self {
        Self { state_norms: vec![super::state_norm(h0)], residuals: Vec::new() }
    }

    fn record(&mut self, next: &Tensor, prev: &Tensor) {
        self.state_norms.push(super::state_norm(next));
        self.residuals.push(super::recurrent_residual(next, prev));
    }

    fn finish(self, final_state: Tensor) -> LoopState {
        LoopState {
            t: self.residuals.len() as u32,
            state_norms: self.state_norms,
            residuals: self.residuals,
            final_state,
        }
    }
}

/// Logits plus loop diagnostics from an inference forward.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub loop_state: LoopState,
    pub flops: FlopCount,
}

enum InjectVars {
    Addition,
    Concat { w_t: Var },
    Parcae { a_bar: Var, b_bar_t: Var, c_t: Var },
}

impl Model {
    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.store
            .entries()
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.tensor().with_grad())
                } else {
                    g.constant(p.tensor())
                }
            })
            .collect()
    }

    /// Discretizes the injection once per graph (the differentiable twin of
    /// `dynamics::discretize`): A_bar = exp(-softplus(delta_raw) .* exp(log_a)),
    /// B_bar = softplus(delta_raw) .* B rowwise.
    fn setup_injection(&self, g: &mut Graph, vars: &[Var]) -> Result<InjectVars, TensorError> {
        match &self.layout.inject {
            InjectLayout::Addition => Ok(InjectVars::Addition),
            InjectLayout::Concat { w } => Ok(InjectVars::Concat { w_t: g.transpose(vars[*w])? }),
            InjectLayout::Parcae { log_a, delta_raw, b, c } => {
                let delta = g.softplus(vars[*delta_raw])?;
                let a_cont = g.exp(vars[*log_a])?;
                let decay = g.mul(delta, a_cont)?;
                let neg = g.neg(decay)?;
                let a_bar = g.exp(neg)?;
                let b_bar = g.scale_rows(vars[*b], delta)?;
                let b_bar_t = g.transpose(b_bar)?;
                let c_t = g.transpose(vars[*c])?;
                Ok(InjectVars::Parcae { a_bar, b_bar_t, c_t })
            }
        }
    }

    fn inject(&self, g: &mut Graph, iv: &InjectVars, h: Var, e: Var) -> Result<Var, TensorError> {
        match iv {
            InjectVars::Addition => g.add(h, e),
            InjectVars::Concat { w_t } => {
                let he = g.concat_cols(&[h, e])?;
                g.matmul(he, *w_t)
            }
            InjectVars::Parcae { a_bar, b_bar_t, .. } => {
                let ah = g.mul_row_vec(h, *a_bar)?;
                let be = g.matmul(e, *b_bar_t)?;
                g.add(ah, be)
            }
        }
    }

    fn block_forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        blk: &BlockLayout,
        x: Var,
    ) -> Result<Var, TensorError> {
        let cfg = &self.config;
        let normed = g.rms_norm(x, vars[blk.ln1], cfg.rms_eps)?;
        let q = g.matmul(normed, vars[blk.wq])?;
        let k = g.matmul(normed, vars[blk.wk])?;
        let v = g.matmul(normed, vars[blk.wv])?;
        let dh = cfg.d_head();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for i in 0..cfg.n_heads {
            let mut qh = g.slice_cols(q, i * dh, dh)?;
            let mut kh = g.slice_cols(k, i * dh, dh)?;
            let vh = g.slice_cols(v, i * dh, dh)?;
            if cfg.qk_norm {
                let unit = g.constant(Tensor::ones(vec![dh]));
                qh = g.rms_norm(qh, unit, cfg.rms_eps)?;
                kh = g.rms_norm(kh, unit, cfg.rms_eps)?;
            }
            heads.push(g.causal_attention(qh, kh, vh, Some(cfg.rope_theta))?);
        }
        let cat = g.concat_cols(&heads)?;
        let attn = g.matmul(cat, vars[blk.wo])?;
        let x = g.add(x, attn)?;
        let normed2 = g.rms_norm(x, vars[blk.ln2], cfg.rms_eps)?;
        let pre = g.matmul(normed2, vars[blk.wfc])?;
        let act = g.relu_squared(pre)?;
        let ff = g.matmul(act, vars[blk.wproj])?;
        g.add(x, ff)
    }

    fn prelude_graph(&self, g: &mut Graph, vars: &[Var], tokens: &[usize]) -> Result<Var, TensorError> {
        let mut e = g.embed(vars[self.layout.embed], tokens)?;
        for blk in &self.layout.prelude {
            e = self.block_forward(g, vars, blk, e)?;
        }
        if let Some(gain) = self.layout.prelude_norm {
            e = g.rms_norm(e, vars[gain], self.config.rms_eps)?;
        }
        Ok(e)
    }

    /// One application of the recurrent unit: inject, then the block stack.
    fn recurrent_stack(
        &self,
        g: &mut Graph,
        vars: &[Var],
        iv: &InjectVars,
        h: Var,
        e: Var,
    ) -> Result<Var, TensorError> {
        let mut u = self.inject(g, iv, h, e)?;
        for blk in &self.layout.recurrent {
            u = self.block_forward(g, vars, blk, u)?;
        }
        Ok(u)
    }

    fn coda_graph(
        &self,
        g: &mut Graph,
        vars: &[Var],
        iv: &InjectVars,
        h: Var,
    ) -> Result<Var, TensorError> {
        let mut x = match iv {
            InjectVars::Parcae { c_t, .. } => g.matmul(h, *c_t)?,
            _ => h,
        };
        for blk in &self.layout.coda {
            x = self.block_forward(g, vars, blk, x)?;
        }
        let x = g.rms_norm(x, vars[self.layout.final_norm], self.config.rms_eps)?;
        let unembed = g.transpose(vars[self.layout.embed])?;
        g.matmul(x, unembed)
    }

    /// Prelude output e = LN(P(s)) (normalization iff configured) as a value.
    pub fn prelude_forward(&self, tokens: &[usize]) -> Result<(Tensor, FlopCount), ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let e = self.prelude_graph(&mut g, &vars, tokens)?;
        Ok((g.value(e).clone(), g.flops()))
    }

    /// One recurrent step h -> h' as a value computation.
    pub fn recurrent_step(&self, h: &Tensor, e: &Tensor) -> Result<(Tensor, FlopCount), ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let iv = self.setup_injection(&mut g, &vars)?;
        let hv = g.constant(h.clone());
        let ev = g.constant(e.clone());
        let out = self.recurrent_stack(&mut g, &vars, &iv, hv, ev)?;
        Ok((g.value(out).clone(), g.flops()))
    }

    /// Coda readout p = C(C h) as a value computation.
    pub fn coda_forward(&self, h: &Tensor) -> Result<(Tensor, FlopCount), ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let iv = self.setup_injection(&mut g, &vars)?;
        let hv = g.constant(h.clone());
        let logits = self.coda_graph(&mut g, &vars, &iv, hv)?;
        Ok((g.value(logits).clone(), g.flops()))
    }

    /// Full forward at fixed depth `t_steps` from an explicit initial state.
    /// Memory stays flat in T: every step runs in its own graph.
    pub fn forward(&self, tokens: &[usize], t_steps: u32, h0: &Tensor) -> Result<ForwardOutput, ModelError> {
        let mut flops = FlopCount::default();
        let (e, f) = self.prelude_forward(tokens)?;
        flops.add(f);
        let mut trace = LoopTrace::new(h0);
        let mut h = h0.clone();
        for _ in 0..t_steps {
            let (next, f) = self.recurrent_step(&h, &e)?;
            flops.add(f);
            trace.record(&next, &h);
            h = next;
        }
        let (logits, f) = self.coda_forward(&h)?;
        flops.add(f);
        Ok(ForwardOutput { logits, loop_state: trace.finish(h), flops })
    }

    /// Forward with the state drawn from the configured init distribution.
    pub fn forward_seeded(&self, tokens: &[usize], t_steps: u32, seed: u64) -> Result<ForwardOutput, ModelError> {
        let h0 = self.init_state(tokens.len(), seed);
        self.forward(tokens, t_steps, &h0)
    }

    /// Builds the differentiated graph for one sequence: n no-grad steps
    /// (outside the graph), k grad steps, coda, and cross-entropy on targets.
    pub fn training_graph(
        &self,
        input: &[usize],
        targets: &[usize],
        n_nograd: u32,
        k_grad: u32,
        h0: &Tensor,
    ) -> Result<TrainingGraph, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, true);
        let iv = self.setup_injection(&mut g, &vars)?;
        let e = self.prelude_graph(&mut g, &vars, input)?;
        let mut trace = LoopTrace::new(h0);
        let mut prefix_flops = FlopCount::default();

        let mut h_var = g.constant(h0.clone());
        if n_nograd > 0 {
            let e_val = g.value(e).clone();
            let mut h = h0.clone();
            for _ in 0..n_nograd {
                let (next, f) = self.recurrent_step(&h, &e_val)?;
                prefix_flops.add(f);
                trace.record(&next, &h);
                h = next;
            }
            h_var = g.constant(h);
        }
        for _ in 0..k_grad {
            let prev = g.value(h_var).clone();
            h_var = self.recurrent_stack(&mut g, &vars, &iv, h_var, e)?;
            trace.record(g.value(h_var), &prev);
        }
        let logits = self.coda_graph(&mut g, &vars, &iv, h_var)?;
        let loss = g.cross_entropy(logits, targets)?;
        let final_state = g.value(h_var).clone();
        Ok(TrainingGraph {
            graph: g,
            loss,
            loop_state: trace.finish(final_state),
            prefix_flops,
            binding: vars,
        })
    }

    /// Mean cross-entropy of a fixed-depth forward on one window.
    pub fn sequence_loss(&self, input: &[usize], targets: &[usize], t_steps: u32, h0_seed: u64) -> Result<f64, ModelError> {
        let out = self.forward_seeded(input, t_steps, h0_seed)?;
        Ok(tensor::cross_entropy_value(&out.logits, targets)?)
    }
}

/// A per-sequence differentiated forward, ready for backward.
pub struct TrainingGraph {
    graph: Graph,
    loss: Var,
    pub loop_state: LoopState,
    prefix_flops: FlopCount,
    binding: Vec<Var>,
}

impl TrainingGraph {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).item()
    }

    pub fn backward(&mut self) -> Result<(), TensorError> {
        self.graph.backward(self.loss)
    }

    /// Gradient for the store entry at `param_idx`, if it received one.
    pub fn grad(&self, param_idx: usize) -> Option<&[f64]> {
        self.graph.grad(self.binding[param_idx])
    }

    /// Forward+backward MACs including the no-grad prefix graphs.
    pub fn flops(&self) -> FlopCount {
        let mut f = self.graph.flops();
        f.add(self.prefix_flops);
        f
    }
}
