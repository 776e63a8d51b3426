//! Filter importance: exact leave-one-filter-out, first-order Taylor, the
//! variance of per-domain risks, and the variance-augmented (IoR) score, plus
//! the exponential moving average that smooths scores across mini-batches.
//!
//! For filter `m` with gate `g_m` and per-domain risks `R_1..R_N`:
//!
//! * exact:  `(mean_i R_i(g) - mean_i R_i(g | g_m = 0))^2`
//! * Taylor: `(g_m * d mean_i R_i / d g_m)^2`
//! * IoR:    Taylor `+ alpha * (g_m * d Var{R_1..R_N} / d g_m)^2`

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domains::DomainBatch;
use crate::error::{Error, Result};
use crate::nn::{FilterId, ForwardPass, GatedModel};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var, VarianceKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoRConfig {
    /// Weight of the variance term.
    pub alpha: f64,
    pub variance_kind: VarianceKind,
}

impl Default for IoRConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            variance_kind: VarianceKind::Population,
        }
    }
}

impl IoRConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-source-domain empirical risks recorded on a shared tape.
#[derive(Clone, Debug)]
pub struct DomainRisks<S> {
    pub domains: Vec<usize>,
    pub risks: Vec<Var>,
    pub values: Vec<S>,
}

impl<S: Scalar> DomainRisks<S> {
    pub fn len(&self) -> usize {
        self.risks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risks.is_empty()
    }
}

/// A forward pass over one balanced batch with per-domain risks attached.
#[derive(Clone, Debug)]
pub struct RiskEvaluation<S> {
    pub tape: Tape<S>,
    pub forward: ForwardPass,
    pub risks: DomainRisks<S>,
}

/// Mean cross-entropy of each domain's sub-batch, all on one tape.
pub fn per_domain_risks<S: Scalar>(model: &GatedModel<S>, batch: &DomainBatch<S>) -> Result<RiskEvaluation<S>> {
    let mut tape = Tape::new();
    let (forward, risks) = record_domain_risks(&mut tape, model, batch)?;
    Ok(RiskEvaluation { tape, forward, risks })
}

/// Records the forward pass and per-domain risks on an existing tape.
pub fn record_domain_risks<S: Scalar>(
    tape: &mut Tape<S>,
    model: &GatedModel<S>,
    batch: &DomainBatch<S>,
) -> Result<(ForwardPass, DomainRisks<S>)> {
    let groups = batch.domain_rows()?;
    let x = tape.constant(batch.images.clone());
    let forward = model.forward_on_tape(tape, x)?;
    let mut risks = Vec::with_capacity(groups.len());
    let mut values = Vec::with_capacity(groups.len());
    let mut domains = Vec::with_capacity(groups.len());
    for (d, rows) in groups {
        let logits = tape.select_rows(forward.logits, &rows)?;
        let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
        let risk = tape.softmax_cross_entropy(logits, &labels)?;
        values.push(tape.scalar(risk));
        risks.push(risk);
        domains.push(d);
    }
    Ok((forward, DomainRisks { domains, risks, values }))
}

/// Differentiable variance of the domain risks (the out-of-distribution risk proxy).
pub fn ood_risk_variance<S: Scalar>(tape: &mut Tape<S>, risks: &DomainRisks<S>, kind: VarianceKind) -> Result<Var> {
    if risks.len() < 2 {
        return Err(Error::TooFewInputs {
            op: "ood_risk_variance",
            min: 2,
            got: risks.len(),
        });
    }
    tape.variance(&risks.risks, kind)
}

/// Gate values with the gradients the scoring rules need, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSnapshot<S> {
    pub values: Vec<Vec<S>>,
    pub pruned: Vec<Vec<bool>>,
    /// `d mean_i R_i / d g`.
    pub mean_risk_grad: Option<Vec<Vec<S>>>,
    /// `d Var{R_i} / d g`.
    pub variance_grad: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> GateSnapshot<S> {
    pub fn from_model(model: &GatedModel<S>) -> Self {
        Self {
            values: model.blocks().iter().map(|b| b.gates.values().to_vec()).collect(),
            pruned: model.blocks().iter().map(|b| b.gates.pruned_mask().to_vec()).collect(),
            mean_risk_grad: None,
            variance_grad: None,
        }
    }

    /// Reads gate gradients currently accumulated on `tape`.
    pub fn read_grads(tape: &Tape<S>, gates: &[Var]) -> Result<Vec<Vec<S>>> {
        gates
            .iter()
            .enumerate()
            .map(|(l, &g)| {
                tape.grad(g)
                    .map(<[S]>::to_vec)
                    .ok_or_else(|| Error::MissingGradient(format!("gate layer {l}")))
            })
            .collect()
    }

    fn check_grads(&self, grads: &[Vec<S>], what: &str) -> Result<()> {
        if grads.len() != self.values.len() || grads.iter().zip(&self.values).any(|(g, v)| g.len() != v.len()) {
            return Err(Error::MissingGradient(format!("{what} does not cover every gate")));
        }
        Ok(())
    }

    fn per_filter(&self, grads: &[Vec<S>]) -> FilterScores<S> {
        self.values
            .iter()
            .zip(&self.pruned)
            .zip(grads)
            .map(|((vals, pruned), gs)| {
                vals.iter()
                    .zip(pruned)
                    .zip(gs)
                    .map(|((&v, &p), &g)| {
                        if p {
                            None
                        } else {
                            let s = v * g;
                            Some(s * s)
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Raw score per filter, `None` for pruned filters.
pub type FilterScores<S> = Vec<Vec<Option<S>>>;

/// First-order Taylor score `(g_m * d mean R / d g_m)^2`.
pub fn taylor_importance<S: Scalar>(snapshot: &GateSnapshot<S>) -> Result<FilterScores<S>> {
    let grads = snapshot
        .mean_risk_grad
        .as_ref()
        .ok_or_else(|| Error::MissingGradient("mean-risk gate gradients".into()))?;
    snapshot.check_grads(grads, "mean-risk gradient")?;
    Ok(snapshot.per_filter(grads))
}

/// Taylor score plus `alpha` times the squared variance-gradient saliency.
pub fn ior_importance<S: Scalar>(snapshot: &GateSnapshot<S>, cfg: &IoRConfig) -> Result<FilterScores<S>> {
    cfg.validate()?;
    let taylor = taylor_importance(snapshot)?;
    let var_grads = snapshot
        .variance_grad
        .as_ref()
        .ok_or_else(|| Error::MissingGradient("variance gate gradients".into()))?;
    snapshot.check_grads(var_grads, "variance gradient")?;
    let variance = snapshot.per_filter(var_grads);
    let alpha = S::of(cfg.alpha);
    Ok(taylor
        .into_iter()
        .zip(variance)
        .map(|(t, v)| {
            t.into_iter()
                .zip(v)
                .map(|(t, v)| match (t, v) {
                    (Some(t), Some(v)) => Some(t + alpha * v),
                    _ => None,
                })
                .collect()
        })
        .collect())
}

/// Inference-only mean over domains of each domain's mean cross-entropy.
pub fn mean_domain_risk<S: Scalar>(model: &GatedModel<S>, domains: &[DomainBatch<S>]) -> Result<S> {
    if domains.is_empty() {
        return Err(Error::TooFewInputs {
            op: "mean_domain_risk",
            min: 1,
            got: 0,
        });
    }
    let mut total = S::zero();
    for batch in domains {
        let logits = model.forward(&batch.images)?;
        let mut tape = Tape::new();
        let z = tape.constant(logits);
        let risk = tape.softmax_cross_entropy(z, &batch.labels)?;
        total += tape.scalar(risk);
    }
    Ok(total / S::of(domains.len() as f64))
}

/// Exact leave-one-filter-out importance over full per-domain data.
///
/// `domains` holds one batch per source domain. The gate is forced to zero
/// for the second evaluation and restored bit-exactly afterwards.
pub fn exact_importance<S: Scalar>(model: &mut GatedModel<S>, domains: &[DomainBatch<S>], id: FilterId) -> Result<S> {
    let base = mean_domain_risk(model, domains)?;
    exact_importance_with_base(model, domains, id, base)
}

/// As [`exact_importance`], reusing a precomputed unpruned mean risk.
pub fn exact_importance_with_base<S: Scalar>(
    model: &mut GatedModel<S>,
    domains: &[DomainBatch<S>],
    id: FilterId,
    base: S,
) -> Result<S> {
    let saved = model.gate_value(id)?;
    if model.is_pruned(id) {
        return Err(Error::PrunedFilter {
            layer: id.layer,
            channel: id.channel,
        });
    }
    model.set_gate(id, S::zero())?;
    let without = mean_domain_risk(model, domains);
    model.set_gate(id, saved)?;
    let diff = base - without?;
    Ok(diff * diff)
}

/// Realized change of the mean risk under `g_m -> g_m (1 - eps)` next to its
/// first-order prediction `eps * g_m * d mean R / d g_m`, for each `eps`.
pub fn first_order_remainders<S: Scalar>(
    model: &mut GatedModel<S>,
    domains: &[DomainBatch<S>],
    id: FilterId,
    mean_risk_grad: S,
    eps: &[f64],
) -> Result<Vec<(f64, S, S)>> {
    let saved = model.gate_value(id)?;
    let base = mean_domain_risk(model, domains)?;
    let mut out = Vec::with_capacity(eps.len());
    for &e in eps {
        let e_s = S::of(e);
        model.set_gate(id, saved * (S::one() - e_s))?;
        let perturbed = mean_domain_risk(model, domains);
        model.set_gate(id, saved)?;
        let realized = base - perturbed?;
        out.push((e, realized, e_s * saved * mean_risk_grad));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportanceEntry<S> {
    pub raw: S,
    pub ema: S,
    pub pruned: bool,
}

/// Per-filter raw and smoothed scores with pruned flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable<S> {
    layers: Vec<Vec<ImportanceEntry<S>>>,
    ema_coefficient: S,
    updates_seen: u64,
}

impl<S: Scalar> ImportanceTable<S> {
    pub fn new(layer_sizes: &[usize], ema_coefficient: f64) -> Result<Self> {
        if !(ema_coefficient > 0.0 && ema_coefficient < 1.0) {
            return Err(Error::Config(format!("EMA coefficient must lie in (0, 1), got {ema_coefficient}")));
        }
        let empty = ImportanceEntry {
            raw: S::zero(),
            ema: S::zero(),
            pruned: false,
        };
        Ok(Self {
            layers: layer_sizes.iter().map(|&n| vec![empty; n]).collect(),
            ema_coefficient: S::of(ema_coefficient),
            updates_seen: 0,
        })
    }

    /// Table shaped like `model`, inheriting its pruned flags.
    pub fn for_model(model: &GatedModel<S>, ema_coefficient: f64) -> Result<Self> {
        let sizes: Vec<usize> = model.blocks().iter().map(|b| b.gates.len()).collect();
        let mut table = Self::new(&sizes, ema_coefficient)?;
        for id in model.filter_ids() {
            if model.is_pruned(id) {
                table.layers[id.layer][id.channel].pruned = true;
            }
        }
        Ok(table)
    }

    pub fn entry(&self, id: FilterId) -> &ImportanceEntry<S> {
        &self.layers[id.layer][id.channel]
    }

    pub fn layers(&self) -> &[Vec<ImportanceEntry<S>>] {
        &self.layers
    }

    pub fn updates_seen(&self) -> u64 {
        self.updates_seen
    }

    pub fn ema_coefficient(&self) -> S {
        self.ema_coefficient
    }

    pub fn mark_pruned(&mut self, id: FilterId) {
        self.layers[id.layer][id.channel].pruned = true;
    }

    /// `ema <- c * ema + (1 - c) * raw` for every unpruned filter.
    pub fn ema_update(&mut self, raw: &FilterScores<S>) -> Result<()> {
        if raw.len() != self.layers.len() || raw.iter().zip(&self.layers).any(|(r, l)| r.len() != l.len()) {
            return Err(Error::Config("score table shape differs from importance table".into()));
        }
        for (layer, (scores, entries)) in raw.iter().zip(&self.layers).enumerate() {
            for (channel, (s, e)) in scores.iter().zip(entries).enumerate() {
                match (s, e.pruned) {
                    (Some(_), true) => return Err(Error::ScoreForPruned { layer, channel }),
                    (None, false) => return Err(Error::MissingScore { layer, channel }),
                    _ => {}
                }
            }
        }
        let c = self.ema_coefficient;
        let one_minus = S::one() - c;
        for (scores, entries) in raw.iter().zip(&mut self.layers) {
            for (s, e) in scores.iter().zip(entries) {
                if let Some(s) = *s {
                    e.raw = s;
                    e.ema = c * e.ema + one_minus * s;
                }
            }
        }
        self.updates_seen += 1;
        Ok(())
    }

    pub fn reset_ema(&mut self) {
        for e in self.layers.iter_mut().flatten() {
            e.ema = S::zero();
        }
    }

    /// CSV with columns `layer_index,channel_index,raw_score,ema_score,pruned`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "layer_index,channel_index,raw_score,ema_score,pruned")?;
        for (l, entries) in self.layers.iter().enumerate() {
            for (c, e) in entries.iter().enumerate() {
                writeln!(out, "{l},{c},{},{},{}", e.raw.to_f64_lossy(), e.ema.to_f64_lossy(), e.pruned)?;
            }
        }
        Ok(())
    }
}

/// Runs the two backward passes a mini-batch needs and returns the gate snapshot.
///
/// The first pass differentiates the mean risk and leaves every parameter
/// gradient on the tape; the returned snapshot copies the gate part. When
/// `variance` is given, gate gradients of the risk variance are added to the
/// snapshot via a second pass restricted to the gates; parameter gradients
/// from the first pass are returned separately so training can use them.
pub fn score_gradients<S: Scalar>(
    model: &GatedModel<S>,
    eval: &mut RiskEvaluation<S>,
    variance: Option<VarianceKind>,
) -> Result<(Var, GateSnapshot<S>, Vec<Vec<S>>)> {
    let mean = eval.tape.mean(&eval.risks.risks)?;
    eval.tape.backward(mean)?;
    let mut snapshot = GateSnapshot::from_model(model);
    snapshot.mean_risk_grad = Some(GateSnapshot::read_grads(&eval.tape, &eval.forward.params.gates)?);
    let param_grads = model
        .param_ids()
        .into_iter()
        .map(|id| {
            eval.tape
                .grad(eval.forward.params.var(id))
                .map(<[S]>::to_vec)
                .ok_or_else(|| Error::MissingGradient(format!("{id:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(kind) = variance {
        let var = ood_risk_variance(&mut eval.tape, &eval.risks, kind)?;
        eval.tape.zero_grads();
        eval.tape.backward_wrt(var, &eval.forward.params.gates)?;
        snapshot.variance_grad = Some(GateSnapshot::read_grads(&eval.tape, &eval.forward.params.gates)?);
    }
    Ok((mean, snapshot, param_grads))
}

/// Scalar tensor helper for tests and callers assembling risks by hand.
pub fn scalar_risks<S: Scalar>(tape: &mut Tape<S>, values: &[S]) -> DomainRisks<S> {
    let risks: Vec<Var> = values.iter().map(|&v| tape.param(Tensor::scalar(v))).collect();
    DomainRisks {
        domains: (0..values.len()).collect(),
        risks,
        values: values.to_vec(),
    }
}
