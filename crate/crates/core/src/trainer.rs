//! Self-supervised training loop, metrics and checkpoint/restore.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde_json::{json, Value};
use sslab_tensor::{Checkpoint, CheckpointError, EmaState, Graph, Params, Scalar, Sgd, Tensor, TensorError, Var};
use thiserror::Error;

use crate::calibration::{solve_local_resolution, CalibrationError, Estimator, SolveRequest};
use crate::config::{ConfigError, Method, TrainConfig};
use crate::datapipe::{assemble_batch, load_raw_dataset, DataError, Dataset, MultiViewBatch, PipelineConfig};
use crate::heads::{
    dino_loss, moco_loss, normalize_rows, swav_loss, DinoHeadState, HeadError, LossBreakdown, MocoQueue, PairLosses,
};
use crate::model::{encode, EncoderConfig};
use crate::seed;
use crate::viewgeom::ViewSetSpec;

pub const METRICS_HEADER: &str = "step,lr,wd,teacher_m,l_g,l_l,total,ps_ratio";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize, diagnostic: Box<Value> },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

impl TrainError {
    /// Overflow or NaN surfacing inside the loss computation.
    pub fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFinite { .. }
                | TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Head(HeadError::Tensor(TensorError::NonFinite { .. }) | HeadError::Underflow)
        )
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// One line of `metrics.csv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub wd: f64,
    /// EMA momentum applied after this step (NaN without a teacher).
    pub teacher_m: f64,
    pub l_g: f64,
    pub l_l: f64,
    pub total: f64,
    /// Batch mean of `PS_g / PS_l` (NaN without local views).
    pub ps_ratio: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.lr, self.wd, self.teacher_m, self.l_g, self.l_l, self.total, self.ps_ratio
        )
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<S: Scalar = f64> {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub student: Params<S>,
    /// EMA teacher (dino) or key encoder (moco).
    pub teacher: Option<Params<S>>,
    pub opt: Sgd<S>,
    pub center: Option<Tensor<S>>,
    pub queue: Option<MocoQueue<S>>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub lc: usize,
}

pub struct Trainer<S: Scalar = f64> {
    cfg: TrainConfig,
    spec: ViewSetSpec,
    encoder: EncoderConfig,
    pipeline: PipelineConfig,
    data: Dataset,
    state: TrainState<S>,
}

/// Encoder layout for a method: only dino uses the logit layer.
pub fn method_encoder(cfg: &TrainConfig) -> EncoderConfig {
    let mut enc = cfg.encoder.clone();
    if cfg.method != Method::Dino {
        enc.out_dim = 0;
    }
    enc
}

/// Resolves `views.lc` (calibration) for the dataset's image size.
pub fn resolve_views(cfg: &TrainConfig, data: &Dataset) -> Result<ViewSetSpec, TrainError> {
    let (h, w, _) = data.dims().ok_or_else(|| DataError::Invalid("empty dataset".into()))?;
    let mut spec = cfg.views;
    if cfg.calibrate.auto_lc {
        let req = SolveRequest {
            target_ratio: cfg.calibrate.target,
            tol: cfg.calibrate.tol,
            n_samples: cfg.calibrate.samples,
            seed: cfg.seed,
            estimator: Estimator::MeanOfRatios,
        };
        spec.lc = solve_local_resolution(&spec, w, h, &req)?.0;
    }
    spec.validate().map_err(DataError::from)?;
    Ok(spec)
}

fn concat_rows<S: Scalar>(parts: &[Tensor<S>]) -> Result<Tensor<S>, TensorError> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(shape, data)
}

/// Per-view outputs of one encoder pass over same-resolution views.
struct ViewOutputs {
    embeddings: Vec<Var>,
    logits: Vec<Var>,
    /// Unsliced `[k·B, ·]` nodes.
    all_embeddings: Var,
    all_logits: Option<Var>,
}

fn encode_views<S: Scalar>(
    g: &mut Graph<S>,
    enc: &EncoderConfig,
    p: &sslab_tensor::Bound,
    views: &[Tensor<S>],
) -> Result<ViewOutputs, TensorError> {
    let b = views[0].shape()[0];
    let x = g.constant(concat_rows(views)?)?;
    let out = encode(g, enc, p, x)?;
    let mut embeddings = Vec::with_capacity(views.len());
    let mut logits = Vec::with_capacity(views.len());
    for k in 0..views.len() {
        embeddings.push(g.slice(out.embedding, 0, k * b, b)?);
        if let Some(l) = out.logits {
            logits.push(g.slice(l, 0, k * b, b)?);
        }
    }
    Ok(ViewOutputs { embeddings, logits, all_embeddings: out.embedding, all_logits: out.logits })
}

/// Student outputs for globals then locals.
fn encode_all<S: Scalar>(
    g: &mut Graph<S>,
    enc: &EncoderConfig,
    p: &sslab_tensor::Bound,
    batch: &MultiViewBatch<S>,
) -> Result<(Vec<Var>, Vec<Var>), TensorError> {
    let mut out = encode_views(g, enc, p, &batch.global)?;
    if !batch.local.is_empty() {
        let loc = encode_views(g, enc, p, &batch.local)?;
        out.embeddings.extend(loc.embeddings);
        out.logits.extend(loc.logits);
    }
    Ok((out.embeddings, out.logits))
}

/// Graph handles produced by one loss evaluation.
pub struct StepGraph<S: Scalar> {
    pub graph: Graph<S>,
    pub student: sslab_tensor::Bound,
    pub losses: PairLosses,
    /// Teacher logits (dino) or keys (moco) of all global views, `[n_g·B, ·]`.
    pub teacher_out: Option<Tensor<S>>,
    /// Swav codes per global view (empty for other methods).
    pub codes: Vec<Tensor<S>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        data.validate()?;
        if data.len() < cfg.batch_size {
            return Err(
                ConfigError::Schema(format!("batch {} exceeds dataset of {}", cfg.batch_size, data.len())).into()
            );
        }
        let spec = resolve_views(&cfg, &data)?;
        let encoder = method_encoder(&cfg);
        let pipeline =
            PipelineConfig { aug: cfg.aug, normalize: cfg.normalize.unwrap_or_else(|| data.channel_stats()) };
        let mut student: Params<S> = encoder.init(&mut seed::stream(cfg.seed, "init", 0))?;
        let teacher = matches!(cfg.method, Method::Dino | Method::Moco).then(|| student.clone());
        if cfg.method == Method::Swav {
            let mut protos: Tensor<S> = EncoderConfig::uniform_init(
                &mut seed::stream(cfg.seed, "init", 1),
                vec![cfg.swav.n_prototypes, encoder.embed],
                encoder.embed,
            );
            normalize_rows(&mut protos);
            student.insert("proto.w", protos);
        }
        let center = (cfg.method == Method::Dino).then(|| Tensor::zeros([encoder.out_dim]));
        let queue = match cfg.method {
            Method::Moco => Some(MocoQueue::new(cfg.moco.queue_size, encoder.embed, S::lit(cfg.moco.temperature))?),
            _ => None,
        };
        let opt = Sgd::new(S::lit(cfg.optim.momentum));
        let state = TrainState { step: 0, student, teacher, opt, center, queue };
        Ok(Self { cfg, spec, encoder, pipeline, data, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// View geometry with the resolved local resolution.
    pub fn views(&self) -> &ViewSetSpec {
        &self.spec
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn pipeline(&self) -> &PipelineConfig {
        &self.pipeline
    }

    pub fn state(&self) -> &TrainState<S> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainState<S> {
        &mut self.state
    }

    /// Dataset rows of step `t`: consecutive slices of a per-epoch permutation.
    pub fn indices(&self, t: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let per_epoch = self.data.len() / b;
        let (epoch, pos) = (t / per_epoch, t % per_epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut seed::stream(self.cfg.seed, "order", epoch as u64));
        order[pos * b..(pos + 1) * b].to_vec()
    }

    pub fn batch(&self, t: usize) -> Result<MultiViewBatch<S>, TrainError> {
        let idx = self.indices(t);
        Ok(assemble_batch(
            &self.data,
            &idx,
            &self.spec,
            &self.pipeline,
            &mut seed::stream(self.cfg.seed, "data", t as u64),
        )?)
    }

    /// Builds the loss graph for `batch` with `student` bound as trainable leaves.
    pub fn loss_graph(&self, student: &Params<S>, batch: &MultiViewBatch<S>) -> Result<StepGraph<S>, TrainError> {
        self.loss_graph_with(student, batch, None)
    }

    /// As [`Self::loss_graph`], with swav codes supplied instead of solved
    /// from this student's scores.
    pub fn loss_graph_with(
        &self,
        student: &Params<S>,
        batch: &MultiViewBatch<S>,
        swav_codes: Option<&[Tensor<S>]>,
    ) -> Result<StepGraph<S>, TrainError> {
        let mut g = Graph::new();
        let sb = student.bind(&mut g, true)?;
        let enc = &self.encoder;
        let n_g = self.spec.n_g;
        let mut codes = Vec::new();
        let (losses, teacher_out) = match self.cfg.method {
            Method::Dino => {
                let (_, s_logits) = encode_all(&mut g, enc, &sb, batch)?;
                let tb = self.state.teacher.as_ref().expect("dino keeps a teacher").bind(&mut g, false)?;
                let t = encode_views(&mut g, enc, &tb, &batch.global)?;
                let d = &self.cfg.dino;
                let head = DinoHeadState {
                    center: self.state.center.clone().expect("dino keeps a center"),
                    teacher_temp: S::lit(d.teacher_temp),
                    student_temp: S::lit(d.student_temp),
                    center_momentum: S::lit(d.center_momentum),
                };
                let center = g.constant(head.center.clone())?;
                let l = dino_loss(&mut g, &s_logits, &t.logits, center, &head, &self.cfg.balance)?;
                let all = t.all_logits.expect("dino encoder has logits");
                (l, Some(g.value(all).clone()))
            }
            Method::Swav => {
                let (emb, _) = encode_all(&mut g, enc, &sb, batch)?;
                let protos = sb.var("proto.w")?;
                let (l, c) = swav_loss(&mut g, &emb, n_g, protos, &self.cfg.swav, &self.cfg.balance, swav_codes)?;
                codes = c;
                (l, None)
            }
            Method::Moco => {
                let (queries, _) = encode_all(&mut g, enc, &sb, batch)?;
                let tb = self.state.teacher.as_ref().expect("moco keeps a key encoder").bind(&mut g, false)?;
                let keys = encode_views(&mut g, enc, &tb, &batch.global)?;
                let queue = self.state.queue.as_ref().expect("moco keeps a queue");
                let l = moco_loss(&mut g, &queries, &keys.embeddings, queue, &self.cfg.balance)?;
                (l, Some(g.value(keys.all_embeddings).clone()))
            }
        };
        Ok(StepGraph { graph: g, student: sb, losses, teacher_out, codes })
    }

    /// Mean teacher logits over the global views of `batch`. A zero center
    /// leaves the first steps effectively uncentered, so step 0 starts here.
    fn first_center(&self, batch: &MultiViewBatch<S>) -> Result<Tensor<S>, TrainError> {
        let mut g = Graph::new();
        let tb = self.state.teacher.as_ref().expect("dino keeps a teacher").bind(&mut g, false)?;
        let t = encode_views(&mut g, &self.encoder, &tb, &batch.global)?;
        let all = t.all_logits.expect("dino encoder has logits");
        let mean = g.mean_axis(all, 0)?;
        Ok(g.value(mean).clone())
    }

    fn schedules(&self, t: usize) -> Result<(f64, f64, f64), TrainError> {
        let o = &self.cfg.optim;
        let n = self.cfg.steps.max(t + 1);
        let m = if self.state.teacher.is_some() { o.teacher_momentum.spec(n).value(t)? } else { f64::NAN };
        Ok((o.lr.spec(n).value(t)?, o.weight_decay.spec(n).value(t)?, m))
    }

    fn diagnostic(&self, t: usize, losses: Result<&LossBreakdown, String>, lr: f64) -> Value {
        let norms: BTreeMap<&String, f64> = self.state.student.iter().map(|(n, p)| (n, p.norm().as_f64())).collect();
        let losses = match losses {
            Ok(lb) => json!({ "l_g": lb.l_g.to_string(), "l_l": lb.l_l.to_string(), "total": lb.total.to_string() }),
            Err(e) => json!({ "error": e }),
        };
        json!({ "step": t, "lr": lr, "losses": losses, "param_norms": norms })
    }

    /// One optimizer step on batch `state.step`; returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        let t = self.state.step;
        let (lr, wd, m) = self.schedules(t)?;
        let batch = self.batch(t)?;
        if t == 0 && self.state.center.is_some() {
            self.state.center = Some(self.first_center(&batch)?);
        }
        let mut sg = match self.loss_graph(&self.state.student, &batch) {
            Err(e) if e.is_non_finite() => {
                let diagnostic = Box::new(self.diagnostic(t, Err(e.to_string()), lr));
                return Err(TrainError::NonFinite { step: t, diagnostic });
            }
            other => other?,
        };
        let lb = sg.losses.breakdown(&sg.graph);
        if ![lb.l_g, lb.l_l, lb.total].iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFinite { step: t, diagnostic: Box::new(self.diagnostic(t, Ok(&lb), lr)) });
        }
        sg.graph.backward(sg.losses.total)?;
        let grads = Params::grads_from(&sg.student, &sg.graph);
        drop(sg.graph);
        let st = &mut self.state;
        st.opt.step(&mut st.student, &grads, S::lit(lr), S::lit(wd))?;
        if let Some(p) = st.student.get_mut("proto.w").ok().filter(|_| lr != 0.0) {
            normalize_rows(p);
        }
        if let Some(teacher) = st.teacher.take() {
            let mut ema = EmaState::new(teacher, S::lit(m));
            ema.update(&st.student)?;
            st.teacher = Some(ema.params);
        }
        if let (Some(center), Some(logits)) = (st.center.as_mut(), sg.teacher_out.as_ref()) {
            let mut head = DinoHeadState {
                center: center.clone(),
                teacher_temp: S::one(),
                student_temp: S::one(),
                center_momentum: S::lit(self.cfg.dino.center_momentum),
            };
            head.update_center(logits)?;
            *center = head.center;
        }
        if let (Some(queue), Some(keys)) = (st.queue.as_mut(), sg.teacher_out.as_ref()) {
            queue.push(keys)?;
        }
        st.step += 1;
        Ok(MetricsRow {
            step: t,
            lr,
            wd,
            teacher_m: m,
            l_g: lb.l_g,
            l_l: lb.l_l,
            total: lb.total,
            ps_ratio: batch.mean_ps_ratio().unwrap_or(f64::NAN),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        let st = &self.state;
        let mut tensors = st.student.prefixed("student.");
        if let Some(t) = &st.teacher {
            tensors.extend(t.prefixed("teacher."));
        }
        tensors.extend(st.opt.velocity().prefixed("velocity."));
        if let Some(c) = &st.center {
            tensors.insert("state.center", c.clone());
        }
        let mut meta = BTreeMap::new();
        if let Some(q) = &st.queue {
            tensors.insert("state.queue", q.buffer().clone());
            meta.insert("queue_cursor".into(), json!(q.cursor()));
            meta.insert("queue_len".into(), json!(q.len()));
        }
        meta.insert("step".into(), json!(st.step));
        meta.insert("method".into(), json!(self.cfg.method.name()));
        meta.insert("lc".into(), json!(self.spec.lc));
        meta.insert("config_hash".into(), json!(self.cfg.hash()));
        meta.insert("encoder".into(), serde_json::to_value(&self.encoder).expect("encoder serializes"));
        Checkpoint { tensors, meta }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Rebuilds a trainer mid-run. The checkpoint must come from the same
    /// configuration (paths aside).
    pub fn restore(cfg: TrainConfig, data: Dataset, path: &Path) -> Result<Self, TrainError> {
        let mut tr = Self::new(cfg, data)?;
        let ck = Checkpoint::<S>::load(path)?;
        let meta_u = |k: &str| {
            ck.meta.get(k).and_then(Value::as_u64).ok_or_else(|| TrainError::Mismatch(format!("missing meta {k}")))
        };
        let hash = ck.meta.get("config_hash").and_then(Value::as_str).unwrap_or_default();
        if hash != tr.cfg.hash() {
            return Err(TrainError::Mismatch("checkpoint was written under a different config".into()));
        }
        let student = ck.tensors.strip_prefix("student.");
        if !student.same_layout(&tr.state.student) {
            return Err(TrainError::Mismatch("student layout differs".into()));
        }
        let st = &mut tr.state;
        st.step = meta_u("step")? as usize;
        st.student = student;
        if st.teacher.is_some() {
            st.teacher = Some(ck.tensors.strip_prefix("teacher."));
        }
        st.opt = Sgd::with_velocity(S::lit(tr.cfg.optim.momentum), ck.tensors.strip_prefix("velocity."));
        if st.center.is_some() {
            st.center = Some(ck.tensors.get("state.center")?.clone());
        }
        if let Some(q) = &st.queue {
            let buffer = ck.tensors.get("state.queue")?.clone();
            st.queue = Some(MocoQueue::from_parts(
                buffer,
                meta_u("queue_cursor")? as usize,
                meta_u("queue_len")? as usize,
                q.temperature,
            )?);
        }
        Ok(tr)
    }

    /// Runs until `config.steps`, writing `metrics.csv`, `timing.csv`,
    /// `config.toml` and checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<RunArtifacts, TrainError> {
        fs::create_dir_all(out_dir).map_err(io(out_dir))?;
        let mut resolved = self.cfg.clone();
        resolved.views = self.spec;
        resolved.calibrate.auto_lc = false;
        resolved.normalize = Some(self.pipeline.normalize);
        let cfg_path = out_dir.join("config.toml");
        fs::write(&cfg_path, resolved.to_toml()).map_err(io(&cfg_path))?;

        let metrics_path = out_dir.join("metrics.csv");
        let timing_path = out_dir.join("timing.csv");
        let mut metrics_out = fs::File::create(&metrics_path).map_err(io(&metrics_path))?;
        let mut timing_out = fs::File::create(&timing_path).map_err(io(&timing_path))?;
        writeln!(metrics_out, "{METRICS_HEADER}").map_err(io(&metrics_path))?;
        writeln!(timing_out, "step,wall_ms").map_err(io(&timing_path))?;

        let mut checkpoints = Vec::new();
        let ckpt_path = |s: usize| out_dir.join(format!("ckpt_{s:06}.json"));
        if self.state.step == 0 {
            let p = ckpt_path(0);
            self.save_checkpoint(&p)?;
            checkpoints.push(p);
        }
        let mut metrics = Vec::new();
        while self.state.step < self.cfg.steps {
            let clock = Instant::now();
            let row = match self.step() {
                Ok(r) => r,
                Err(TrainError::NonFinite { step, diagnostic }) => {
                    let p = out_dir.join("diagnostic.json");
                    let text = serde_json::to_string_pretty(&diagnostic).expect("json value serializes");
                    fs::write(&p, text).map_err(io(&p))?;
                    return Err(TrainError::NonFinite { step, diagnostic });
                }
                Err(e) => return Err(e),
            };
            writeln!(metrics_out, "{}", row.csv()).map_err(io(&metrics_path))?;
            writeln!(timing_out, "{},{:.3}", row.step, clock.elapsed().as_secs_f64() * 1e3)
                .map_err(io(&timing_path))?;
            metrics.push(row);
            let done = self.state.step;
            if self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0 && done < self.cfg.steps {
                let p = ckpt_path(done);
                self.save_checkpoint(&p)?;
                checkpoints.push(p);
            }
        }
        let fin = out_dir.join("final.json");
        self.save_checkpoint(&fin)?;
        Ok(RunArtifacts { metrics, checkpoints, final_checkpoint: Some(fin), lc: self.spec.lc })
    }
}

/// Loads `config.dataset` and runs the whole schedule into `config.out_dir`.
pub fn train(cfg: TrainConfig) -> Result<RunArtifacts, TrainError> {
    let data_path = cfg.dataset.clone().ok_or_else(|| ConfigError::Schema("dataset path missing".into()))?;
    let out = cfg.out_dir.clone().ok_or_else(|| ConfigError::Schema("out_dir missing".into()))?;
    let data = load_raw_dataset(&data_path)?;
    Trainer::<f64>::new(cfg, data)?.run(&out)
}
