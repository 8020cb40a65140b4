//! The recommender: ID embeddings, per-view graph learning, propagation,
//! fusion, an LSTM sequence encoder, and the EM training loop.
//!
//! Training alternates two phases. The E-step reclusters each view's
//! structure embeddings (one K-Means assign+update round); the M-step runs
//! one Adam update on the composite loss: next-POI cross entropy plus
//! weighted clustering-alignment, view-agreement, and orthogonality terms.
//! Every batch rebuilds the whole computation on a fresh tape, so training
//! and evaluation share one forward path; evaluation merely registers
//! parameters as constants instead of trainable leaves.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, EstepCadence, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, RankedSample};
use crate::fusion::{self, NegativePolicy, NEGATIVE_SAMPLE_CAP};
use crate::gnn::{self, RelationWeights};
use crate::ingest::{self, Dataset, FeatureView};
use crate::optim::{clip_global_norm, derive_rng, Adam, ParamId, ParameterStore};
use crate::structure::{self, BiLevelGraph, GslTransformVars, PrototypeSet, StructureConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Matrix;

/// Adam moment defaults.
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Evaluation scores this many test samples per tape extension.
const EVAL_BATCH: usize = 256;

/// Parameter ids for one two-layer structure transform.
#[derive(Debug, Clone, Copy)]
pub struct GslIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter ids for one view's propagation weights. Prototype transforms
/// exist only while the prototype level does.
#[derive(Debug, Clone, Copy)]
pub struct GnnIds {
    pub w_poi: ParamId,
    pub w_proto1: Option<ParamId>,
    pub w_proto2: Option<ParamId>,
    pub w_self: ParamId,
    pub a1: ParamId,
}

/// Everything one view owns.
#[derive(Debug, Clone, Copy)]
pub struct ViewIds {
    pub sl: Option<GslIds>,
    pub proto: Option<GslIds>,
    pub gnn: GnnIds,
}

/// Stable names/ids of every registered parameter. Registration order is
/// fixed, so checkpoints and gradient vectors line up across runs.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub poi_embed: ParamId,
    pub user_embed: ParamId,
    pub views: Vec<ViewIds>,
    pub a2: Option<ParamId>,
    pub w_inj: Option<ParamId>,
    pub lstm_wx: ParamId,
    pub lstm_wh: ParamId,
    pub lstm_b: ParamId,
    pub w_out: ParamId,
}

/// One prediction task: the context `visits[start..end]` and the target
/// `visits[end]` of one user's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub start: usize,
    pub end: usize,
}

/// Loss components of one batch, as plain numbers for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub hsl: f64,
    pub sh: f64,
    pub sp: f64,
}

/// One epoch of the training log. Loss fields are means over batches
/// (cross entropy itself sums over each batch's samples).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

/// The trainable system: parameters, clustering state, and config.
pub struct Model {
    pub config: RunConfig,
    pub store: ParameterStore,
    pub layout: ParamLayout,
    pub views: Vec<FeatureView>,
    /// Clustering state per view; `None` while the prototype level is off.
    pub prototypes: Vec<Option<PrototypeSet>>,
    /// Constant adjacency per view for the rule-based ablation.
    pub rule_adjacency: Vec<Option<Matrix>>,
    pub adam: Adam,
    /// Epochs already completed (supports resuming).
    pub epoch: usize,
    pub n_pois: usize,
    pub n_users: usize,
}

impl Model {
    /// Builds parameters and per-view state for a preprocessed dataset.
    /// Initialization draws from a stream derived from (seed, "init"), in
    /// fixed registration order.
    pub fn new(config: RunConfig, dataset: &Dataset) -> Result<Model> {
        config.validate()?;
        let n = dataset.poi_count();
        let m = dataset.user_count();
        let views = ingest::build_views(dataset, &config.views());
        let (d2, d3) = (config.d2, config.d3);
        let prototypes_on = config.ablation.prototypes_enabled();
        let learned = config.ablation.learned_graph();

        let mut store = ParameterStore::new();
        let mut rng = derive_rng(config.seed, "init", 0, 0);
        let mut uniform = |store: &mut ParameterStore, name: String, r: usize, c: usize, fan: usize| {
            store.register_uniform(&name, r, c, fan, &mut rng)
        };

        let poi_embed = uniform(&mut store, "poi_embed".into(), n, d2, d2);
        let user_embed = uniform(&mut store, "user_embed".into(), m, d2, d2);

        let mut view_ids = Vec::new();
        for view in &views {
            let v = view.kind.name();
            let d1 = view.d1();
            let sl = learned.then(|| GslIds {
                w1: uniform(&mut store, format!("{v}.sl.w1"), d2, d1, d1),
                b1: uniform(&mut store, format!("{v}.sl.b1"), 1, d2, d1),
                w2: uniform(&mut store, format!("{v}.sl.w2"), d2, d2, d2),
                b2: uniform(&mut store, format!("{v}.sl.b2"), 1, d2, d2),
            });
            let proto = prototypes_on.then(|| GslIds {
                w1: uniform(&mut store, format!("{v}.proto.w1"), d2, d2, d2),
                b1: uniform(&mut store, format!("{v}.proto.b1"), 1, d2, d2),
                w2: uniform(&mut store, format!("{v}.proto.w2"), d2, d2, d2),
                b2: uniform(&mut store, format!("{v}.proto.b2"), 1, d2, d2),
            });
            let gnn = GnnIds {
                w_poi: uniform(&mut store, format!("{v}.gnn.w_poi"), d3, d2, d2),
                w_proto1: prototypes_on
                    .then(|| uniform(&mut store, format!("{v}.gnn.w_proto1"), d3, d2, d2)),
                w_proto2: prototypes_on
                    .then(|| uniform(&mut store, format!("{v}.gnn.w_proto2"), d3, d2, d2)),
                w_self: uniform(&mut store, format!("{v}.gnn.w_self"), d3, d2, d2),
                a1: uniform(&mut store, format!("{v}.gnn.a1"), 1, 2 * d3, 2 * d3),
            };
            view_ids.push(ViewIds { sl, proto, gnn });
        }

        let a2 = (views.len() >= 2).then(|| uniform(&mut store, "fusion.a2".into(), 1, d3, d3));
        let w_inj =
            (!views.is_empty()).then(|| uniform(&mut store, "fusion.w_inj".into(), d2, d3, d3));
        let lstm_wx = uniform(&mut store, "lstm.wx".into(), 4 * d3, d2, d2);
        let lstm_wh = uniform(&mut store, "lstm.wh".into(), 4 * d3, d3, d3);
        let lstm_b = uniform(&mut store, "lstm.b".into(), 1, 4 * d3, d3);
        let w_out = uniform(&mut store, "out.w".into(), n, d3 + d2, d3 + d2);

        let layout = ParamLayout {
            poi_embed,
            user_embed,
            views: view_ids,
            a2,
            w_inj,
            lstm_wx,
            lstm_wh,
            lstm_b,
            w_out,
        };

        let rule_adjacency = views
            .iter()
            .map(|view| {
                if learned {
                    None
                } else {
                    Some(match view.kind {
                        ingest::ViewKind::Spatial => structure::spatial_rule_adjacency(
                            &dataset.pois,
                            config.rule_distance_km,
                        ),
                        ingest::ViewKind::Temporal => {
                            structure::temporal_rule_adjacency(&view.x)
                        }
                    })
                }
            })
            .collect();

        let adam = Adam::new(config.lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, &store);
        let mut model = Model {
            config,
            store,
            layout,
            views,
            prototypes: Vec::new(),
            rule_adjacency,
            adam,
            epoch: 0,
            n_pois: n,
            n_users: m,
        };
        model.prototypes = vec![None; model.views.len()];
        if prototypes_on {
            model.init_prototypes()?;
        }
        Ok(model)
    }

    /// Registers every parameter on a tape, trainable or constant, and
    /// returns the vars indexed by `ParamId`.
    fn tape_vars(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        (0..self.store.len())
            .map(|i| {
                let value = self.store.value(ParamId(i)).clone();
                if trainable {
                    tape.param(value)
                } else {
                    tape.leaf(value)
                }
            })
            .collect()
    }

    fn gsl_vars(ids: GslIds, vars: &[Var]) -> GslTransformVars {
        GslTransformVars {
            w1: vars[ids.w1.0],
            b1: vars[ids.b1.0],
            w2: vars[ids.w2.0],
            b2: vars[ids.b2.0],
        }
    }

    fn structure_config(&self) -> StructureConfig {
        StructureConfig {
            k: self.config.k,
            tau1: self.config.tau1,
            epsilon: self.config.epsilon,
            top_k: self.config.top_k,
        }
    }

    /// Structure embeddings of one view under the current parameters,
    /// computed off to the side (constants only).
    fn current_structure_embeddings(&self, view_idx: usize) -> Result<Matrix> {
        let ids = self.layout.views[view_idx]
            .sl
            .expect("structure embeddings require the learned transform");
        let mut tape = Tape::new();
        let x = tape.leaf(self.views[view_idx].x.clone());
        let t = GslTransformVars {
            w1: tape.leaf(self.store.value(ids.w1).clone()),
            b1: tape.leaf(self.store.value(ids.b1).clone()),
            w2: tape.leaf(self.store.value(ids.w2).clone()),
            b2: tape.leaf(self.store.value(ids.b2).clone()),
        };
        let z = structure::structure_embed(&mut tape, x, &t)?;
        Ok(tape.value(z).clone())
    }

    fn init_prototypes(&mut self) -> Result<()> {
        for i in 0..self.views.len() {
            let z = self.current_structure_embeddings(i)?;
            let mut rng = derive_rng(
                self.config.seed,
                &format!("kmeans-init-{}", self.views[i].kind.name()),
                0,
                0,
            );
            let mut state = structure::kmeans_init(&z, self.config.k, &mut rng)?;
            structure::kmeans_estep(&z, &mut state)?;
            self.prototypes[i] = Some(state);
        }
        Ok(())
    }

    /// One E-step round per view: reassign all POIs to the nearest
    /// centroid and recompute centroids, on current structure embeddings.
    pub fn estep(&mut self) -> Result<()> {
        if !self.config.ablation.prototypes_enabled() {
            return Ok(());
        }
        for i in 0..self.views.len() {
            let z = self.current_structure_embeddings(i)?;
            let state = self.prototypes[i]
                .as_mut()
                .expect("prototype state initialized in new()");
            structure::kmeans_estep(&z, state)?;
        }
        Ok(())
    }

    /// Graph construction and propagation for one view. Returns the POI
    /// representations and, when the prototype level is active, the
    /// clustering-alignment loss input (structure embeddings stay on tape).
    fn view_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        view_idx: usize,
    ) -> Result<(Var, Option<Var>, BiLevelGraph)> {
        let cfg = self.structure_config();
        let ids = &self.layout.views[view_idx];
        let x = tape.leaf(self.views[view_idx].x.clone());
        let e_id = vars[self.layout.poi_embed.0];

        let (graph, z) = match (&ids.sl, &ids.proto) {
            (Some(sl), Some(proto)) => {
                let state = self.prototypes[view_idx]
                    .as_ref()
                    .expect("prototype state present when level enabled");
                let sl_vars = Self::gsl_vars(*sl, vars);
                let proto_vars = Self::gsl_vars(*proto, vars);
                let (z, graph) = structure::build_bilevel_graph(
                    tape,
                    x,
                    &sl_vars,
                    &proto_vars,
                    state,
                    &cfg,
                )?;
                (graph, Some(z))
            }
            (Some(sl), None) => {
                let sl_vars = Self::gsl_vars(*sl, vars);
                let (z, graph) = structure::build_pairwise_graph(tape, x, &sl_vars, &cfg)?;
                (graph, Some(z))
            }
            (None, _) => {
                let adjacency = self.rule_adjacency[view_idx]
                    .clone()
                    .expect("rule adjacency built for non-learned graphs");
                (structure::build_rule_graph(tape, adjacency, &cfg)?, None)
            }
        };

        let gnn_ids = &ids.gnn;
        // Unused placeholder for the prototype transforms when that level
        // is off; propagation never reads it without prototype features.
        let dummy = tape.leaf(Matrix::zeros((1, 1)));
        let weights = RelationWeights {
            w_poi: vars[gnn_ids.w_poi.0],
            w_proto1: gnn_ids.w_proto1.map(|p| vars[p.0]).unwrap_or(dummy),
            w_proto2: gnn_ids.w_proto2.map(|p| vars[p.0]).unwrap_or(dummy),
            w_self: vars[gnn_ids.w_self.0],
            a1: vars[gnn_ids.a1.0],
        };
        let proto_features = if graph.a_proto.is_some() {
            Some(gnn::prototype_features(
                tape,
                e_id,
                &graph.assignments,
                graph.k(),
            )?)
        } else {
            None
        };
        let out = gnn::propagate(tape, &graph, e_id, proto_features, &weights)?;

        let hsl = match (z, self.prototypes.get(view_idx).and_then(|p| p.as_ref())) {
            (Some(z), Some(state)) => Some(structure::hsl_loss(tape, z, state, cfg.tau1)?),
            _ => None,
        };
        Ok((out.p, hsl, graph))
    }

    fn negative_policy(&self) -> NegativePolicy {
        if self.n_pois.saturating_sub(1) <= NEGATIVE_SAMPLE_CAP {
            NegativePolicy::Full
        } else {
            NegativePolicy::Sampled {
                seed: self.config.seed,
                cap: NEGATIVE_SAMPLE_CAP,
            }
        }
    }

    /// The graph-and-fusion half of the forward pass: enriched POI
    /// embeddings plus the three auxiliary losses (absent where their
    /// component is disabled or weightless).
    fn representation_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
    ) -> Result<(Var, Option<Var>, Option<Var>, Option<Var>, Vec<BiLevelGraph>)> {
        let e_id = vars[self.layout.poi_embed.0];
        let (beta_hsl, beta_sh, beta_sp) = self.config.effective_betas();

        let mut per_view = Vec::new();
        let mut hsl_terms = Vec::new();
        let mut graphs = Vec::new();
        for i in 0..self.views.len() {
            let (p, hsl, graph) = self.view_forward(tape, vars, i)?;
            per_view.push(p);
            if let Some(h) = hsl {
                hsl_terms.push(h);
            }
            graphs.push(graph);
        }

        if per_view.is_empty() {
            return Ok((e_id, None, None, None, graphs));
        }

        let l_hsl = if beta_hsl > 0.0 && !hsl_terms.is_empty() {
            let mut acc = hsl_terms[0];
            for &t in &hsl_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(acc)
        } else {
            None
        };

        let a2 = match self.layout.a2 {
            Some(id) => vars[id.0],
            // Single view: fuse() bypasses attention entirely.
            None => tape.leaf(Matrix::zeros((1, self.config.d3))),
        };
        let fused = fusion::fuse(tape, &per_view, a2)?;
        let (l_sh, l_sp) = match &fused.shared {
            Some(shared) => {
                let sh = (beta_sh > 0.0)
                    .then(|| {
                        fusion::shared_loss(
                            tape,
                            &per_view,
                            *shared,
                            self.config.tau2,
                            self.negative_policy(),
                        )
                    })
                    .transpose()?;
                let sp = (beta_sp > 0.0)
                    .then(|| fusion::orthogonality_loss(tape, &fused.specific))
                    .transpose()?;
                (sh, sp)
            }
            None => (None, None),
        };

        let w_inj = vars[self.layout.w_inj.expect("views imply injection").0];
        let enriched = fusion::enrich_embedding(tape, e_id, fused.fused, w_inj)?;
        Ok((enriched, l_hsl, l_sh, l_sp, graphs))
    }

    /// Runs the LSTM over a batch of variable-length contexts and returns
    /// the final hidden state per sample, in input order. Sequences are
    /// processed longest-first so each step works on a prefix block.
    fn encode_batch(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        enriched: Var,
        samples: &[Sample],
        dataset: &Dataset,
    ) -> Result<Var> {
        let d3 = self.config.d3;
        let b = samples.len();
        if b == 0 {
            return Err(Error::EmptySequence);
        }
        let lens: Vec<usize> = samples.iter().map(|s| s.end - s.start).collect();
        if lens.iter().any(|&l| l == 0) {
            return Err(Error::EmptySequence);
        }

        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(lens[i]), i));
        let mut rank_of = vec![0usize; b];
        for (rank, &i) in order.iter().enumerate() {
            rank_of[i] = rank;
        }
        let max_len = lens[order[0]];
        // active[t] = how many sorted samples still run at step t.
        let active: Vec<usize> = (0..max_len)
            .map(|t| order.iter().take_while(|&&i| lens[i] > t).count())
            .collect();

        let wx = vars[self.layout.lstm_wx.0];
        let wh = vars[self.layout.lstm_wh.0];
        let bias = vars[self.layout.lstm_b.0];

        let mut h = tape.leaf(Matrix::zeros((b, d3)));
        let mut c = tape.leaf(Matrix::zeros((b, d3)));
        // Final states captured as (sorted ranks lo..hi, rows var).
        let mut finished: Vec<Var> = Vec::new();

        for t in 0..max_len {
            let a = active[t];
            let pois: Vec<usize> = order[..a]
                .iter()
                .map(|&i| {
                    let s = samples[i];
                    dataset.sequences[s.user].visits[s.start + t].poi
                })
                .collect();
            let x_t = tape.gather_rows(enriched, &pois)?;
            let h_prev = tape.slice_rows(h, a)?;
            let c_prev = tape.slice_rows(c, a)?;

            let from_x = tape.matmul_nt(x_t, wx)?;
            let from_h = tape.matmul_nt(h_prev, wh)?;
            let pre = tape.add(from_x, from_h)?;
            let pre = tape.add_row(pre, bias)?;
            let i_gate = tape.slice_cols(pre, 0, d3)?;
            let i_gate = tape.sigmoid(i_gate);
            let f_gate = tape.slice_cols(pre, d3, 2 * d3)?;
            let f_gate = tape.sigmoid(f_gate);
            let g_cand = tape.slice_cols(pre, 2 * d3, 3 * d3)?;
            let g_cand = tape.tanh(g_cand);
            let o_gate = tape.slice_cols(pre, 3 * d3, 4 * d3)?;
            let o_gate = tape.sigmoid(o_gate);

            let keep = tape.mul(f_gate, c_prev)?;
            let write = tape.mul(i_gate, g_cand)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c);
            h = tape.mul(o_gate, squashed)?;

            // Samples ending at this step occupy ranks next_active..a.
            let next_active = if t + 1 < max_len { active[t + 1] } else { 0 };
            if next_active < a {
                let exit_rows: Vec<usize> = (next_active..a).collect();
                finished.push(tape.gather_rows(h, &exit_rows)?);
            }
        }

        // Groups exited shortest-first (highest ranks first); reversing
        // them yields sorted rank order 0..b.
        finished.reverse();
        let sorted_h = tape.concat_rows(&finished)?;
        tape.gather_rows(sorted_h, &rank_of)
    }

    /// Output logits for a batch: one score per POI from the concatenated
    /// final hidden state and user embedding.
    fn predict_logits(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h: Var,
        users: &[usize],
    ) -> Result<Var> {
        let u = tape.gather_rows(vars[self.layout.user_embed.0], users)?;
        let cat = tape.concat_cols(h, u)?;
        tape.matmul_nt(cat, vars[self.layout.w_out.0])
    }

    /// Full forward pass for one batch of samples; returns the total-loss
    /// var and the numeric breakdown.
    fn batch_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        samples: &[Sample],
        dataset: &Dataset,
    ) -> Result<(Var, LossBreakdown)> {
        let (enriched, l_hsl, l_sh, l_sp, _graphs) = self.representation_forward(tape, vars)?;
        let h = self.encode_batch(tape, vars, enriched, samples, dataset)?;
        let users: Vec<usize> = samples.iter().map(|s| s.user).collect();
        let targets: Vec<usize> = samples
            .iter()
            .map(|s| dataset.sequences[s.user].visits[s.end].poi)
            .collect();
        let logits = self.predict_logits(tape, vars, h, &users)?;
        let ce = tape.nll_rows(logits, &targets)?;

        let (beta_hsl, beta_sh, beta_sp) = self.config.effective_betas();
        let mut total = ce;
        let mut breakdown = LossBreakdown {
            ce: tape.scalar(ce)?,
            ..LossBreakdown::default()
        };
        if let Some(l) = l_hsl {
            breakdown.hsl = tape.scalar(l)?;
            let scaled = tape.scale(l, beta_hsl);
            total = tape.add(total, scaled)?;
        }
        if let Some(l) = l_sh {
            breakdown.sh = tape.scalar(l)?;
            let scaled = tape.scale(l, beta_sh);
            total = tape.add(total, scaled)?;
        }
        if let Some(l) = l_sp {
            breakdown.sp = tape.scalar(l)?;
            let scaled = tape.scale(l, beta_sp);
            total = tape.add(total, scaled)?;
        }
        breakdown.total = tape.scalar(total)?;
        Ok((total, breakdown))
    }

    /// All training prediction tasks: every non-empty prefix of every
    /// user's training subsequence, window-capped at `max_seq_len`.
    pub fn train_samples(&self, dataset: &Dataset) -> Vec<Sample> {
        let cap = self.config.max_seq_len;
        let mut out = Vec::new();
        for seq in &dataset.sequences {
            let train_len = dataset.train_len[seq.user];
            for end in 1..train_len {
                out.push(Sample {
                    user: seq.user,
                    start: end.saturating_sub(cap),
                    end,
                });
            }
        }
        out
    }

    /// Test prediction tasks: one per held-out visit, with the context
    /// window ending right before it (training plus earlier test visits).
    pub fn test_samples(&self, dataset: &Dataset) -> Vec<Sample> {
        let cap = self.config.max_seq_len;
        let mut out = Vec::new();
        for seq in &dataset.sequences {
            let train_len = dataset.train_len[seq.user];
            for end in train_len..seq.visits.len() {
                out.push(Sample {
                    user: seq.user,
                    start: end.saturating_sub(cap),
                    end,
                });
            }
        }
        out
    }

    /// Trains from the current epoch up to the configured epoch budget.
    /// Returns one log record per completed epoch.
    pub fn train(&mut self, dataset: &Dataset) -> Result<Vec<EpochLog>> {
        let all_samples = self.train_samples(dataset);
        if all_samples.is_empty() {
            return Err(Error::EmptyAfterFilter);
        }
        let mut logs = Vec::new();

        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            if self.config.estep == EstepCadence::Epoch {
                self.estep()?;
            }

            let mut order: Vec<usize> = (0..all_samples.len()).collect();
            let mut rng = derive_rng(self.config.seed, "shuffle", epoch as u64, 0);
            // Fisher-Yates, matching the derived stream exactly.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }

            let mut epoch_loss = LossBreakdown::default();
            let mut grad_norm_sum = 0.0;
            let mut batches = 0usize;
            for (batch_idx, chunk) in order.chunks(self.config.batch_size).enumerate() {
                if self.config.estep == EstepCadence::Batch {
                    self.estep()?;
                }
                let batch: Vec<Sample> = chunk.iter().map(|&i| all_samples[i]).collect();
                let mut tape = Tape::new();
                let vars = self.tape_vars(&mut tape, true);
                let (total, breakdown) =
                    self.batch_forward(&mut tape, &vars, &batch, dataset)?;
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss { batch: batch_idx });
                }

                let grads = tape.backward(total)?;
                let mut grad_vec: Vec<Matrix> = (0..self.store.len())
                    .map(|i| {
                        grads
                            .get(vars[i])
                            .cloned()
                            .unwrap_or_else(|| Matrix::zeros(self.store.value(ParamId(i)).dim()))
                    })
                    .collect();
                grad_norm_sum += clip_global_norm(&mut grad_vec, self.config.clip_norm);
                self.adam.step(&mut self.store, &grad_vec);

                epoch_loss.total += breakdown.total;
                epoch_loss.ce += breakdown.ce;
                epoch_loss.hsl += breakdown.hsl;
                epoch_loss.sh += breakdown.sh;
                epoch_loss.sp += breakdown.sp;
                batches += 1;
            }

            let scale = 1.0 / batches as f64;
            logs.push(EpochLog {
                epoch,
                batches,
                loss: LossBreakdown {
                    total: epoch_loss.total * scale,
                    ce: epoch_loss.ce * scale,
                    hsl: epoch_loss.hsl * scale,
                    sh: epoch_loss.sh * scale,
                    sp: epoch_loss.sp * scale,
                },
                grad_norm: grad_norm_sum * scale,
            });
            self.epoch += 1;
        }
        Ok(logs)
    }

    /// Predicted next-POI distributions (rows sum to 1) for a batch of
    /// samples under the current parameters. Shared by evaluation and the
    /// invariant tests; no gradients are recorded.
    pub fn score_samples(&self, dataset: &Dataset, samples: &[Sample]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.tape_vars(&mut tape, false);
        let (enriched, _, _, _, _) = self.representation_forward(&mut tape, &vars)?;
        let mut scores = Matrix::zeros((samples.len(), self.n_pois));
        for (chunk_idx, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
            let h = self.encode_batch(&mut tape, &vars, enriched, chunk, dataset)?;
            let users: Vec<usize> = chunk.iter().map(|s| s.user).collect();
            let logits = self.predict_logits(&mut tape, &vars, h, &users)?;
            let dist = tape.softmax_rows(logits);
            let block = tape.value(dist);
            for (r, row) in block.rows().into_iter().enumerate() {
                scores
                    .row_mut(chunk_idx * EVAL_BATCH + r)
                    .assign(&row);
            }
        }
        Ok(scores)
    }

    /// Scores every held-out visit and aggregates the ranking metrics.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalReport> {
        let samples = self.test_samples(dataset);
        let scores = self.score_samples(dataset, &samples)?;
        let mut ranked = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let target = dataset.sequences[s.user].visits[s.end].poi;
            let row: Vec<f64> = scores.row(i).to_vec();
            ranked.push(RankedSample {
                user: s.user,
                target,
                rank: eval::target_rank(&row, target)?,
            });
        }
        Ok(eval::build_report(&ranked, &train_history(dataset)))
    }

    /// Materializes every view's graphs at the current parameters, without
    /// touching gradients. `a_hier` is the N x K one-hot membership matrix;
    /// it and `a_proto` are absent while the prototype level is off.
    pub fn graph_snapshots(&self) -> Result<Vec<GraphSnapshot>> {
        let mut tape = Tape::new();
        let vars = self.tape_vars(&mut tape, false);
        let mut out = Vec::with_capacity(self.views.len());
        for i in 0..self.views.len() {
            let (_, _, graph) = self.view_forward(&mut tape, &vars, i)?;
            let a_hier = (!graph.assignments.is_empty()).then(|| {
                let mut m = Matrix::zeros((graph.assignments.len(), self.config.k));
                for (row, &c) in graph.assignments.iter().enumerate() {
                    m[(row, c)] = 1.0;
                }
                m
            });
            out.push(GraphSnapshot {
                view: self.views[i].kind,
                a_poi: tape.value(graph.a_poi).clone(),
                a_hier,
                a_proto: graph.a_proto.map(|v| tape.value(v).clone()),
                assignments: graph.assignments,
            });
        }
        Ok(out)
    }

    /// The POI embeddings the sequence encoder actually consumes: ID
    /// embeddings plus the injected fused view representation.
    pub fn enriched_embeddings(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.tape_vars(&mut tape, false);
        let (enriched, _, _, _, _) = self.representation_forward(&mut tape, &vars)?;
        Ok(tape.value(enriched).clone())
    }
}

/// One view's constructed graphs, materialized for inspection or export.
#[derive(Debug, Clone)]
pub struct GraphSnapshot {
    pub view: ingest::ViewKind,
    /// N x N row-stochastic POI adjacency.
    pub a_poi: Matrix,
    /// N x K one-hot cluster membership, when clustering is active.
    pub a_hier: Option<Matrix>,
    /// K x K row-stochastic prototype adjacency, when clustering is active.
    pub a_proto: Option<Matrix>,
    /// Per-POI cluster index, empty when clustering is off.
    pub assignments: Vec<usize>,
}

/// Trains and evaluates the full configuration plus its five ablations on
/// the same data and seed, in the order of [`Ablation::ALL`].
pub fn run_ablations(
    dataset: &Dataset,
    base_config: &RunConfig,
) -> Result<Vec<(Ablation, EvalReport)>> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for &ablation in &Ablation::ALL {
        let config = RunConfig {
            ablation,
            ..base_config.clone()
        };
        let mut model = Model::new(config, dataset)?;
        model.train(dataset)?;
        rows.push((ablation, model.evaluate(dataset)?));
    }
    Ok(rows)
}

/// POIs each user visited during training, for the next-new filter.
pub fn train_history(dataset: &Dataset) -> BTreeMap<usize, BTreeSet<usize>> {
    dataset
        .sequences
        .iter()
        .map(|seq| {
            let train_len = dataset.train_len[seq.user];
            (
                seq.user,
                seq.visits[..train_len].iter().map(|v| v.poi).collect(),
            )
        })
        .collect()
}
