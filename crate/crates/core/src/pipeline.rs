//! Training and evaluation runs: coarse pre-training, fine-grained
//! pre-training, task fine-tuning and evaluation, each writing into a run
//! directory guarded by an advisory lock.
//!
//! A run directory holds `config.txt` (canonical config), `metrics.jsonl`
//! (one `{"step", "name", "value"}` object per line, appended),
//! `checkpoint.fbr` for training runs and `report.json` for evaluations.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use fiber_tensor::{Rng, Tape, Tensor, Var};

use crate::adapters::caption::{caption_decode, caption_train_step};
use crate::adapters::detection::{detect, grounding_score, PhraseDetection};
use crate::adapters::retrieval::{fused_pair_scores, CorpusCache};
use crate::adapters::{classify, rerank_topk, retrieve_dual, CaptionHead, ClassifierHead, DetectionHead, ItmHead, MlmHead};
use crate::checkpoint::{Checkpoint, CheckpointStage, LoadReport};
use crate::config::{Config, Objectives, Stage, Task};
use crate::data::{read_dataset, write_dataset, PixelEncoding};
use crate::data::metrics::{average_precision, bleu4, grounding_recall, recall_at_k, words, Detection};
use crate::data::{generate_dataset, image_batch, Record, Vocab, ANSWERS, MAX_OBJECTS};
use crate::error::{Error, Result};
use crate::fusion::{Backbone, Mode, Streams, TextBatch};
use crate::objectives::{
    assign_targets, centerness, centerness_loss, cross_entropy, focal_loss_sum, giou_loss_ltrb, grounding_targets, itc_loss, itm_loss,
    mask_tokens, mlm_loss, sample_hard_negatives, similarity_logits, BBox, CENTER_RADIUS, INITIAL_INV_TEMPERATURE, MLM_RATE,
};
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::params::{Bound, Builder, Group, ParamId, ParamStore};

pub const CHECKPOINT_FILE: &str = "checkpoint.fbr";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const REPORT_FILE: &str = "report.json";
pub const LOCK_FILE: &str = "run.lock";
pub const DATA_FILE: &str = "data.jsonl";

// Random stream tags, so every consumer of the seed draws independently.
const STREAM_BATCHES: u64 = 0xba7c;
const STREAM_STEP: u64 = 0x57e9;
const STREAM_PROBE: u64 = 0x960b;
const EVAL_CHUNK: usize = 32;

/// What a model is built for; decides which heads exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Coarse,
    Fine,
    Task(Task),
}

/// Backbone plus the heads of one purpose, sharing one parameter store.
pub struct Model {
    pub config: Config,
    pub purpose: Purpose,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub logit_scale: Option<ParamId>,
    pub itm: Option<ItmHead>,
    pub mlm: Option<MlmHead>,
    pub detection: Option<DetectionHead>,
    pub classifier: Option<ClassifierHead>,
    pub caption: Option<CaptionHead>,
}

fn missing(what: &str) -> Error {
    Error::Contract(format!("model has no {what} head"))
}

impl Model {
    pub fn new(config: &Config, purpose: Purpose) -> Result<Model> {
        let arch = &config.arch;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(arch, &mut store, config.seed)?;
        let mut b = Builder::new(&mut store, config.seed, Group::Head);
        let (mut logit_scale, mut itm, mut mlm, mut detection, mut classifier, mut caption) = (None, None, None, None, None, None);
        match purpose {
            Purpose::Coarse => {
                logit_scale = Some(b.constant("logit_scale", Tensor::scalar(INITIAL_INV_TEMPERATURE.ln())));
                itm = Some(ItmHead::new(&mut b, arch));
                mlm = Some(MlmHead::new(&mut b, arch));
            }
            Purpose::Task(Task::Retrieval) => {
                logit_scale = Some(b.constant("logit_scale", Tensor::scalar(INITIAL_INV_TEMPERATURE.ln())));
                itm = Some(ItmHead::new(&mut b, arch));
            }
            Purpose::Fine | Purpose::Task(Task::Grounding) => detection = Some(DetectionHead::new(&mut b, arch, arch.text.width)),
            Purpose::Task(Task::Classify) => classifier = Some(ClassifierHead::new(&mut b, arch, config.classifier_hidden, ANSWERS.len())),
            Purpose::Task(Task::Caption) => caption = Some(CaptionHead::new(&mut b, &backbone)),
        }
        Ok(Model {
            config: config.clone(),
            purpose,
            store,
            backbone,
            logit_scale,
            itm,
            mlm,
            detection,
            classifier,
            caption,
        })
    }

    /// Largest absolute gate value, or `None` without gates.
    pub fn gate_max_abs(&self) -> Option<f64> {
        let ids = self.backbone.gate_ids();
        (!ids.is_empty()).then(|| ids.iter().map(|&id| self.store.value(id).max_abs()).fold(0.0, f64::max))
    }
}

/// Exclusive handle on a run directory; the lock file is removed on drop.
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<RunDir> {
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(Error::Locked(format!("{} is held by another run (remove it if that run is gone)", lock.display())));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(RunDir { path: path.to_path_buf(), lock })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Serialize)]
struct MetricLine<'a> {
    step: u64,
    name: &'a str,
    value: f64,
}

/// Append-only newline-delimited metric records.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn log(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        serde_json::to_writer(&mut self.out, &MetricLine { step, name, value }).map_err(|e| Error::Data(e.to_string()))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

/// Result of a training run.
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub checkpoint_hash: String,
    pub load_report: Option<LoadReport>,
    /// Final logged value of every metric, plus `train.loss_tail`, the mean
    /// total loss over the last tenth of the steps.
    pub summary: BTreeMap<String, f64>,
}

/// Training records from `data.train`, or the synthetic set given by
/// `data.seed` and `data.count`.
pub fn load_train_data(cfg: &Config) -> Result<Vec<Record>> {
    let records = match &cfg.data_train {
        Some(p) => read_dataset(p)?,
        None => generate_dataset(cfg.data_seed, cfg.data_count),
    };
    if records.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    Ok(records)
}

/// Evaluation records from `data.eval`, falling back to the training set.
pub fn load_eval_data(cfg: &Config) -> Result<Vec<Record>> {
    match &cfg.data_eval {
        Some(p) => {
            let r = read_dataset(p)?;
            if r.is_empty() {
                return Err(Error::Data("evaluation set is empty".into()));
            }
            Ok(r)
        }
        None => load_train_data(cfg),
    }
}

fn require_boxes(records: &[Record], prompts: bool) -> Result<()> {
    let bad = records.iter().find(|r| if prompts { r.prompt_targets.is_empty() } else { r.targets.is_empty() });
    match bad {
        Some(r) => Err(Error::Data(format!("record {} has no box annotations; grounding needs image-text-box data", r.index))),
        None => Ok(()),
    }
}

/// Writes a synthetic dataset and returns its hash.
pub fn run_gen_data(seed: u64, count: usize, path: &Path) -> Result<String> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(path, seed, &generate_dataset(seed, count), PixelEncoding::Hex)
}

/// Epoch-wise shuffled mini-batches.
struct Batcher {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn new(seed: u64, n: usize, size: usize) -> Self {
        Self {
            rng: Rng::derive(seed, STREAM_BATCHES),
            order: (0..n).collect(),
            pos: n,
            size: size.min(n),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

type StepParts = Vec<(&'static str, Var)>;

struct Trained {
    optimizer: AdamW,
    summary: BTreeMap<String, f64>,
}

fn add_all(parts: &StepParts) -> Result<Var> {
    let mut it = parts.iter();
    let first = it.next().ok_or_else(|| Error::Contract("training step produced no loss".into()))?.1.clone();
    it.try_fold(first, |acc, (_, v)| Ok(acc.add(v)?))
}

/// Runs `cfg.steps` optimizer steps. `step_fn` returns the named loss terms
/// of one step; their sum is minimized.
fn train(model: &mut Model, schedule: Schedule, log: &mut MetricsLog, mut step_fn: impl FnMut(&Model, &Bound, u64) -> Result<StepParts>) -> Result<Trained> {
    let cfg = model.config.clone();
    let mut optimizer = AdamW::new(&model.store, cfg.weight_decay);
    let mut summary = BTreeMap::new();
    let tail_from = cfg.steps - (cfg.steps / 10).max(1).min(cfg.steps);
    let (mut tail_sum, mut tail_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = model.store.bind(Some(&tape));
        let parts = step_fn(model, &p, step)?;
        let total = add_all(&parts)?;
        let total_value = total.value().item()?;
        if !total_value.is_finite() {
            return Err(Error::Contract(format!("training diverged at step {step}: loss is {total_value}")));
        }
        let grads = tape.backward(&total)?;
        let mut g = p.collect_grads(&grads);
        drop(p);
        let grad_norm = match cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut g, c),
            None => clip_grad_norm(&mut g, f64::INFINITY),
        };
        let factor = schedule.factor(step);
        optimizer.update(&mut model.store, &g, cfg.rates, factor);
        if step >= tail_from {
            tail_sum += total_value;
            tail_n += 1;
        }
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let mut entries: Vec<(String, f64)> = parts.iter().map(|(n, v)| (format!("loss.{n}"), v.value().data()[0])).collect();
            entries.push(("loss.total".into(), total_value));
            entries.push(("grad_norm".into(), grad_norm));
            entries.push(("lr_factor".into(), factor));
            if let Some(g) = model.gate_max_abs() {
                entries.push(("gate.max_abs".into(), g));
            }
            for (name, value) in entries {
                log.log(step, &name, value)?;
                summary.insert(name, value);
            }
        }
    }
    if tail_n > 0 {
        let tail = tail_sum / tail_n as f64;
        log.log(cfg.steps, "train.loss_tail", tail)?;
        summary.insert("train.loss_tail".into(), tail);
    }
    Ok(Trained { optimizer, summary })
}

fn text_batch(records: &[&Record], field: fn(&Record) -> &Vec<usize>) -> TextBatch {
    TextBatch::new(records.iter().map(|r| field(r).clone()).collect())
}

fn caption_ids(r: &Record) -> &Vec<usize> {
    &r.tokens
}

fn prompt_ids(r: &Record) -> &Vec<usize> {
    &r.prompt_tokens
}

fn question_ids(r: &Record) -> &Vec<usize> {
    &r.question_tokens
}

fn uniform_negative(i: usize, n: usize, rng: &mut Rng) -> usize {
    let j = rng.below(n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

/// Contrastive, matching and masked-language terms for one batch.
fn coarse_terms(model: &Model, p: &Bound, objectives: Objectives, records: &[&Record], rng: &mut Rng) -> Result<StepParts> {
    let bb = &model.backbone;
    let n = records.len();
    let pixels = image_batch(records);
    let texts = text_batch(records, caption_ids);
    let (scales, xi) = bb.image_lower(p, &pixels)?;
    let mut parts: StepParts = Vec::new();
    if objectives.itc || objectives.matching() {
        let scale = model.logit_scale.ok_or_else(|| missing("contrastive"))?;
        let (xt, lengths) = bb.text_lower(p, &texts)?;
        let clean = Streams {
            text: xt,
            text_lengths: lengths,
            lower_scales: scales.clone(),
            image: xi.clone(),
        };
        let dual = bb.upper(p, &clean, false)?;
        let logits = similarity_logits(&bb.pool_image(p, &dual)?, &bb.pool_text(p, &dual)?, &p[scale])?;
        if objectives.itc {
            parts.push(("itc", itc_loss(&logits)?));
        }
        if objectives.matching() {
            let itm = model.itm.as_ref().ok_or_else(|| missing("matching"))?;
            let sim = logits.value();
            let (neg_t, neg_i) = if objectives.itm_hard {
                (sample_hard_negatives(sim, rng)?, sample_hard_negatives(&sim.transpose()?, rng)?)
            } else {
                let t = (0..n).map(|i| uniform_negative(i, n, rng)).collect();
                let im = (0..n).map(|i| uniform_negative(i, n, rng)).collect();
                (t, im)
            };
            let mut i_idx: Vec<usize> = (0..n).collect();
            let mut t_idx: Vec<usize> = (0..n).collect();
            for i in 0..n {
                if i % 2 == 0 {
                    i_idx.push(i);
                    t_idx.push(neg_t[i]);
                } else {
                    i_idx.push(neg_i[i]);
                    t_idx.push(i);
                }
            }
            let f = bb.upper(p, &clean.pair(&t_idx, &i_idx)?, true)?;
            let is_match: Vec<bool> = (0..2 * n).map(|k| k < n).collect();
            parts.push(("itm", itm_loss(&itm.logits(p, &f)?, &is_match)?));
        }
    }
    if objectives.mlm {
        let head = model.mlm.as_ref().ok_or_else(|| missing("masked-language"))?;
        let masked = mask_tokens(&texts.ids, rng, MLM_RATE, model.config.arch.text.vocab_size);
        parts.push(("mlm", masked_lm_loss(model, head, p, &masked.inputs, &masked.labels, scales, xi)?));
    }
    Ok(parts)
}

fn masked_lm_loss(model: &Model, head: &MlmHead, p: &Bound, inputs: &[Vec<usize>], labels: &[Vec<Option<usize>>], scales: Vec<Var>, xi: Var) -> Result<Var> {
    let bb = &model.backbone;
    let batch = TextBatch::new(inputs.to_vec());
    let l = batch.max_len();
    let (xt, lengths) = bb.text_lower(p, &batch)?;
    let streams = Streams {
        text: xt,
        text_lengths: lengths,
        lower_scales: scales,
        image: xi,
    };
    let f = bb.upper(p, &streams, true)?;
    let v = model.config.arch.text.vocab_size;
    let logits = head.forward(p, &f.text)?.reshape(vec![inputs.len() * l, v])?;
    let flat: Vec<Option<usize>> = labels.iter().flat_map(|s| s.iter().copied().chain(std::iter::repeat(None)).take(l)).collect();
    Ok(mlm_loss(&logits, &flat)?.loss)
}

/// Mean masked-token loss on a fixed masking of the first `cfg.mlm_probe`
/// records.
pub fn mlm_probe(model: &Model, records: &[Record]) -> Result<f64> {
    let head = model.mlm.as_ref().ok_or_else(|| missing("masked-language"))?;
    let probe: Vec<&Record> = records.iter().take(model.config.mlm_probe.max(1)).collect();
    let mut rng = Rng::derive(model.config.seed, STREAM_PROBE);
    let p = model.store.bind(None);
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in probe.chunks(EVAL_CHUNK) {
        let texts = text_batch(chunk, caption_ids);
        let masked = mask_tokens(&texts.ids, &mut rng, MLM_RATE, model.config.arch.text.vocab_size);
        let c = masked.masked_count();
        if c == 0 {
            continue;
        }
        let (scales, xi) = model.backbone.image_lower(&p, &image_batch(chunk))?;
        let loss = masked_lm_loss(model, head, &p, &masked.inputs, &masked.labels, scales, xi)?;
        sum += loss.value().item()? * c as f64;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Dual-encoder R@1 in both directions on the first `cfg.itc_probe` records
/// with distinct captions.
pub fn itc_probe(model: &Model, records: &[Record]) -> Result<(f64, f64)> {
    let mut seen = std::collections::HashSet::new();
    let probe: Vec<&Record> = records.iter().filter(|r| seen.insert(r.caption.clone())).take(model.config.itc_probe.max(2)).collect();
    let (img, txt) = dual_embeddings(model, &probe)?;
    let dual = retrieve_dual(&img, &txt, 1)?;
    let gold: Vec<usize> = (0..probe.len()).collect();
    let ranks = |lists: &[Vec<(usize, f64)>]| -> Vec<Vec<usize>> { lists.iter().map(|l| l.iter().map(|x| x.0).collect()).collect() };
    Ok((recall_at_k(&ranks(&dual.i2t), &gold, 1), recall_at_k(&ranks(&dual.t2i), &gold, 1)))
}

fn dual_embeddings(model: &Model, records: &[&Record]) -> Result<(Tensor, Tensor)> {
    let p = model.store.bind(None);
    let (mut imgs, mut txts) = (Vec::new(), Vec::new());
    for chunk in records.chunks(EVAL_CHUNK) {
        imgs.push(model.backbone.embed_images(&p, &image_batch(chunk))?.into_value());
        txts.push(model.backbone.embed_texts(&p, &text_batch(chunk, caption_ids))?.into_value());
    }
    let cat = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::concat(&v.iter().collect::<Vec<_>>(), 0)?) };
    Ok((cat(imgs)?, cat(txts)?))
}

fn check_init_arch(cfg: &Config, init: &Checkpoint) -> Result<()> {
    if init.config.arch != cfg.arch {
        return Err(Error::Config(
            "architecture keys differ from the init checkpoint; copy them from its config (see inspect-checkpoint)".into(),
        ));
    }
    Ok(())
}

fn start_run(cfg: &Config, out: &Path) -> Result<(RunDir, MetricsLog)> {
    cfg.validate()?;
    let dir = RunDir::open(out)?;
    fs::write(dir.file(CONFIG_FILE), cfg.to_text())?;
    let log = MetricsLog::open(&dir.file(METRICS_FILE))?;
    Ok((dir, log))
}

fn finish_run(dir: &RunDir, mut log: MetricsLog, model: &Model, stage: CheckpointStage, provenance: Vec<String>, trained: Trained, load_report: Option<LoadReport>) -> Result<RunOutput> {
    log.flush()?;
    let checkpoint = Checkpoint::from_store(&model.config, stage, provenance, model.config.steps, &model.store, Some(&trained.optimizer));
    let checkpoint_path = dir.file(CHECKPOINT_FILE);
    let checkpoint_hash = checkpoint.save(&checkpoint_path)?;
    Ok(RunOutput {
        checkpoint,
        checkpoint_path,
        checkpoint_hash,
        load_report,
        summary: trained.summary,
    })
}

/// Coarse-grained pre-training on image-caption pairs with the enabled
/// subset of contrastive, matching and masked-language objectives.
pub fn run_pretrain_coarse(cfg: &Config, out: &Path) -> Result<RunOutput> {
    if cfg.stage != Stage::Coarse {
        return Err(Error::Config("pretrain-coarse needs `stage = coarse`".into()));
    }
    if !cfg.objectives.any() {
        return Err(Error::Config("coarse pre-training needs at least one of mlm, itm, itm_hard, itc".into()));
    }
    let records = load_train_data(cfg)?;
    if records.len() < 2 {
        return Err(Error::Data("coarse pre-training needs at least two pairs".into()));
    }
    let (dir, mut log) = start_run(cfg, out)?;
    let mut model = Model::new(cfg, Purpose::Coarse)?;
    let objectives = cfg.objectives;
    if objectives.mlm {
        log.log(0, "probe.mlm_loss", mlm_probe(&model, &records)?)?;
    }
    let mut batches = Batcher::new(cfg.seed, records.len(), cfg.batch_size);
    let schedule = Schedule::WarmupLinear {
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    let mut trained = train(&mut model, schedule, &mut log, |m, p, step| {
        let batch: Vec<&Record> = batches.next().into_iter().map(|i| &records[i]).collect();
        let mut rng = Rng::derive(m.config.seed ^ STREAM_STEP, step);
        coarse_terms(m, p, objectives, &batch, &mut rng)
    })?;
    if objectives.mlm {
        let v = mlm_probe(&model, &records)?;
        log.log(cfg.steps, "probe.mlm_loss", v)?;
        trained.summary.insert("probe.mlm_loss".into(), v);
    }
    if objectives.itc {
        let (i2t, t2i) = itc_probe(&model, &records)?;
        log.log(cfg.steps, "probe.itc_r1_i2t", i2t)?;
        log.log(cfg.steps, "probe.itc_r1_t2i", t2i)?;
        trained.summary.insert("probe.itc_r1_i2t".into(), i2t);
        trained.summary.insert("probe.itc_r1_t2i".into(), t2i);
    }
    finish_run(&dir, log, &model, CheckpointStage::Pretrain(Stage::Coarse), Vec::new(), trained, None)
}

/// Word-region alignment, centerness and GIoU terms for one batch of
/// grounded captions (or detection prompts).
fn grounding_terms(model: &Model, p: &Bound, records: &[&Record], prompts: bool) -> Result<StepParts> {
    let head = model.detection.as_ref().ok_or_else(|| missing("detection"))?;
    let bb = &model.backbone;
    let texts = text_batch(records, if prompts { prompt_ids } else { caption_ids });
    let f = bb.features(p, &image_batch(records), &texts, true)?;
    let out = head.forward(p, &f.image_scales)?;
    let s = grounding_score(&out.regions, &f.text)?;
    let (b, r, l) = (records.len(), head.num_locations(), texts.max_len());
    let locations = head.locations();
    let mut targets = Vec::with_capacity(b * r * l);
    let mut weights = Vec::with_capacity(b * r * l);
    let (mut pos_rows, mut ctr_t, mut box_t) = (Vec::new(), Vec::new(), Vec::new());
    for (bi, rec) in records.iter().enumerate() {
        let gts = if prompts { &rec.prompt_targets } else { &rec.targets };
        let boxes: Vec<BBox> = gts.iter().map(|t| t.bbox).collect();
        let spans: Vec<(usize, usize)> = gts.iter().map(|t| t.span).collect();
        let assignment = assign_targets(&head.levels, &boxes, CENTER_RADIUS);
        targets.extend_from_slice(grounding_targets(&assignment.targets, &spans, l)?.data());
        let len = texts.ids[bi].len();
        weights.extend((0..r * l).map(|i| if i % l < len { 1.0 } else { 0.0 }));
        for (ri, a) in assignment.targets.iter().enumerate() {
            if let Some(k) = a {
                let (x, y) = locations[ri];
                pos_rows.push(bi * r + ri);
                ctr_t.push(centerness(x, y, &boxes[*k])?);
                box_t.extend_from_slice(&boxes[*k].ltrb_from(x, y));
            }
        }
    }
    let npos = pos_rows.len();
    let focal = focal_loss_sum(&s.reshape(vec![b * r, l])?, &Tensor::new(vec![b * r, l], targets)?, &Tensor::new(vec![b * r, l], weights)?)?
        .scale(1.0 / npos.max(1) as f64);
    let mut parts: StepParts = vec![("grounding", focal)];
    if npos > 0 {
        let ctr = out.centerness.reshape(vec![b * r, 1])?.select_rows(&pos_rows)?;
        parts.push(("centerness", centerness_loss(&ctr, &Tensor::new(vec![npos, 1], ctr_t)?)?));
        let pred = out.ltrb.reshape(vec![b * r, 4])?.select_rows(&pos_rows)?;
        parts.push(("giou", giou_loss_ltrb(&pred, &Tensor::new(vec![npos, 4], box_t)?)?.mean_all()));
    }
    Ok(parts)
}

fn init_from(model: &mut Model, cfg: &Config, init: Option<&Checkpoint>) -> Result<(Option<LoadReport>, Vec<String>)> {
    match init {
        Some(ck) => {
            check_init_arch(cfg, ck)?;
            let report = ck.load_into(&mut model.store)?;
            let mut provenance = ck.provenance.clone();
            provenance.push(ck.stage.to_string());
            Ok((Some(report), provenance))
        }
        None => Ok((None, Vec::new())),
    }
}

/// Fine-grained pre-training of the backbone and detection head on grounded
/// captions, optionally initialized from a coarse checkpoint.
pub fn run_pretrain_fine(cfg: &Config, init: Option<&Checkpoint>, out: &Path) -> Result<RunOutput> {
    if cfg.stage != Stage::Fine {
        return Err(Error::Config("pretrain-fine needs `stage = fine`".into()));
    }
    if let Some(ck) = init {
        if ck.stage != CheckpointStage::Pretrain(Stage::Coarse) {
            return Err(Error::Stage(format!(
                "fine-grained pre-training starts from a coarse checkpoint, got `{}`; run pretrain-coarse first or omit --init",
                ck.stage
            )));
        }
    }
    let records = load_train_data(cfg)?;
    require_boxes(&records, false)?;
    let (dir, mut log) = start_run(cfg, out)?;
    let mut model = Model::new(cfg, Purpose::Fine)?;
    let (report, provenance) = init_from(&mut model, cfg, init)?;
    if let Some(r) = &report {
        log.log(0, "init.loaded", r.loaded.len() as f64)?;
        log.log(0, "init.fresh", r.fresh.len() as f64)?;
    }
    let mut batches = Batcher::new(cfg.seed, records.len(), cfg.batch_size);
    let schedule = Schedule::WarmupStepDrops {
        warmup: cfg.warmup_steps,
        total: cfg.steps,
    };
    let mut trained = train(&mut model, schedule, &mut log, |m, p, _| {
        let batch: Vec<&Record> = batches.next().into_iter().map(|i| &records[i]).collect();
        grounding_terms(m, p, &batch, false)
    })?;
    let r1 = grounding_eval(&model, &records, false)?.recall[0];
    log.log(cfg.steps, "train.grounding_r1", r1)?;
    trained.summary.insert("train.grounding_r1".into(), r1);
    finish_run(&dir, log, &model, CheckpointStage::Pretrain(Stage::Fine), provenance, trained, report)
}

/// Fine-tunes a task head (and the backbone) from a compatible checkpoint,
/// or from scratch when `init` is `None`.
pub fn run_finetune(task: Task, cfg: &Config, init: Option<&Checkpoint>, out: &Path) -> Result<RunOutput> {
    if let Some(ck) = init {
        ck.require_for_task(task)?;
    }
    if task == Task::Caption {
        crate::adapters::caption::image_context_supported(&cfg.arch)?;
    }
    let records = load_train_data(cfg)?;
    if task == Task::Grounding {
        require_boxes(&records, true)?;
    }
    let (dir, mut log) = start_run(cfg, out)?;
    let mut model = Model::new(cfg, Purpose::Task(task))?;
    let (report, provenance) = init_from(&mut model, cfg, init)?;
    let mut batches = Batcher::new(cfg.seed, records.len(), cfg.batch_size);
    let schedule = match task {
        Task::Grounding => Schedule::WarmupStepDrops {
            warmup: cfg.warmup_steps,
            total: cfg.steps,
        },
        _ => Schedule::WarmupLinear {
            warmup: cfg.warmup_steps,
            total: cfg.steps,
        },
    };
    let retrieval_objectives = Objectives {
        mlm: false,
        itm: false,
        itm_hard: true,
        itc: true,
    };
    let trained = train(&mut model, schedule, &mut log, |m, p, step| {
        let batch: Vec<&Record> = batches.next().into_iter().map(|i| &records[i]).collect();
        match task {
            Task::Classify => {
                let head = m.classifier.as_ref().ok_or_else(|| missing("classifier"))?;
                let enc = m.backbone.encode(p, &image_batch(&batch), &text_batch(&batch, question_ids), Mode::Fused)?;
                let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();
                Ok(vec![("classify", cross_entropy(&classify(head, p, &enc)?, &labels)?)])
            }
            Task::Retrieval => {
                let mut rng = Rng::derive(m.config.seed ^ STREAM_STEP, step);
                coarse_terms(m, p, retrieval_objectives, &batch, &mut rng)
            }
            Task::Caption => {
                let head = m.caption.as_ref().ok_or_else(|| missing("caption"))?;
                let ids: Vec<Vec<usize>> = batch.iter().map(|r| r.tokens.clone()).collect();
                Ok(vec![("caption", caption_train_step(&m.backbone, head, p, &m.config.caption, &image_batch(&batch), &ids)?)])
            }
            Task::Grounding => grounding_terms(m, p, &batch, true),
        }
    })?;
    finish_run(&dir, log, &model, CheckpointStage::Finetune(task), provenance, trained, report)
}

/// Ranked boxes per phrase and per record.
pub struct GroundingEval {
    /// Recall@1/5/10 at IoU 0.5.
    pub recall: [f64; 3],
    /// Average precision at IoU 0.5 over all phrases.
    pub ap: f64,
}

fn grounding_eval(model: &Model, records: &[Record], prompts: bool) -> Result<GroundingEval> {
    let head = model.detection.as_ref().ok_or_else(|| missing("detection"))?;
    let p = model.store.bind(None);
    let mut ranked: Vec<Vec<BBox>> = Vec::new();
    let mut golds: Vec<BBox> = Vec::new();
    let mut dets: Vec<Detection> = Vec::new();
    let mut gold_keys: Vec<(usize, BBox)> = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        let (ids, gts) = if prompts { (&rec.prompt_tokens, &rec.prompt_targets) } else { (&rec.tokens, &rec.targets) };
        let spans: Vec<(usize, usize)> = gts.iter().map(|t| t.span).collect();
        let enc = model.backbone.encode(&p, &image_batch(&[rec]), &TextBatch::new(vec![ids.clone()]), Mode::Fused)?;
        let found = detect(head, &p, &enc, &spans, 0.0, model.config.nms_iou)?;
        for (k, t) in gts.iter().enumerate() {
            let mine: Vec<&PhraseDetection> = found.iter().filter(|d| d.span == t.span).collect();
            ranked.push(mine.iter().map(|d| d.bbox).collect());
            golds.push(t.bbox);
            let key = ri * MAX_OBJECTS + k;
            gold_keys.push((key, t.bbox));
            dets.extend(mine.iter().filter(|d| d.score > model.config.score_thresh).map(|d| Detection {
                image: key,
                bbox: d.bbox,
                score: d.score,
            }));
        }
    }
    Ok(GroundingEval {
        recall: grounding_recall(&ranked, &golds, 0.5),
        ap: average_precision(&dets, &gold_keys, 0.5),
    })
}

fn pass_counts(model: &Model, report: &mut BTreeMap<String, f64>) {
    let c = model.backbone.counter.snapshot();
    report.insert("passes.dual_images".into(), c.dual_images as f64);
    report.insert("passes.dual_texts".into(), c.dual_texts as f64);
    report.insert("passes.fused_pairs".into(), c.fused_pairs as f64);
    report.insert("passes.total".into(), c.total() as f64);
}

/// Retrieval metrics for a model with a matching head: dual-encoder recall,
/// re-ranked recall and the backbone passes each needed.
fn retrieval_eval(model: &Model, records: &[Record], report: &mut BTreeMap<String, f64>) -> Result<()> {
    let itm = model.itm.as_ref().ok_or_else(|| missing("matching"))?;
    let refs: Vec<&Record> = records.iter().collect();
    let n = refs.len();
    let counter = &model.backbone.counter;
    counter.reset();
    let (img, txt) = dual_embeddings(model, &refs)?;
    let dual = retrieve_dual(&img, &txt, n)?;
    let dual_passes = counter.snapshot().total();
    let gold: Vec<usize> = (0..n).collect();
    let i2t: Vec<Vec<usize>> = dual.i2t.iter().map(|l| l.iter().map(|x| x.0).collect()).collect();
    let t2i: Vec<Vec<usize>> = dual.t2i.iter().map(|l| l.iter().map(|x| x.0).collect()).collect();
    for k in [1, 5, 10] {
        report.insert(format!("dual.i2t_r{k}"), recall_at_k(&i2t, &gold, k));
        report.insert(format!("dual.t2i_r{k}"), recall_at_k(&t2i, &gold, k));
    }
    report.insert("passes.dual".into(), dual_passes as f64);
    let k = model.config.rerank_k;
    if k > 0 {
        let cache = CorpusCache::build(&model.backbone, &model.store, &image_batch(&refs), &text_batch(&refs, caption_ids))?;
        let st = dual.scores.transpose()?;
        let rr_i2t = rerank_topk(&dual.scores, k, |pairs| fused_pair_scores(&model.backbone, itm, &model.store, &cache, pairs))?;
        let rr_t2i = rerank_topk(&st, k, |pairs| {
            let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(t, i)| (i, t)).collect();
            fused_pair_scores(&model.backbone, itm, &model.store, &cache, &swapped)
        })?;
        for kk in [1, 5, 10] {
            report.insert(format!("rerank.i2t_r{kk}"), recall_at_k(&rr_i2t, &gold, kk));
            report.insert(format!("rerank.t2i_r{kk}"), recall_at_k(&rr_t2i, &gold, kk));
        }
        report.insert("passes.rerank".into(), counter.snapshot().total() as f64);
        report.insert("rerank.k".into(), k.min(n) as f64);
    }
    Ok(())
}

/// Evaluates `task` on the evaluation records; returns the metric report
/// and writes it to the run directory.
pub fn run_eval(task: Task, cfg: &Config, checkpoint: Option<&Checkpoint>, out: &Path) -> Result<BTreeMap<String, f64>> {
    let model_cfg = match checkpoint {
        Some(ck) => {
            ck.require_for_task(task)?;
            let mut c = ck.config.clone();
            c.rerank_k = cfg.rerank_k;
            c.score_thresh = cfg.score_thresh;
            c.nms_iou = cfg.nms_iou;
            c.caption = cfg.caption;
            c
        }
        None => cfg.clone(),
    };
    let records = load_eval_data(cfg)?;
    let (dir, mut log) = start_run(cfg, out)?;
    let mut model = Model::new(&model_cfg, Purpose::Task(task))?;
    if let Some(ck) = checkpoint {
        ck.load_into(&mut model.store)?;
    }
    let step = checkpoint.map_or(0, |c| c.step);
    let mut report = BTreeMap::new();
    report.insert("eval.records".into(), records.len() as f64);
    match task {
        Task::Classify => {
            let head = model.classifier.as_ref().ok_or_else(|| missing("classifier"))?;
            let p = model.store.bind(None);
            let mut correct = 0usize;
            for chunk in records.iter().collect::<Vec<_>>().chunks(EVAL_CHUNK) {
                let enc = model.backbone.encode(&p, &image_batch(chunk), &text_batch(chunk, question_ids), Mode::Fused)?;
                let logits = classify(head, &p, &enc)?.into_value();
                let c = ANSWERS.len();
                for (i, r) in chunk.iter().enumerate() {
                    let row = &logits.data()[i * c..(i + 1) * c];
                    let pred = crate::adapters::rank_desc(row)[0];
                    correct += usize::from(pred == r.label);
                }
            }
            report.insert("accuracy".into(), correct as f64 / records.len() as f64);
        }
        Task::Retrieval => retrieval_eval(&model, &records, &mut report)?,
        Task::Caption => {
            let head = model.caption.as_ref().ok_or_else(|| missing("caption"))?;
            let p = model.store.bind(None);
            let vocab = Vocab::builtin();
            let (mut cands, mut refs, mut exact) = (Vec::new(), Vec::new(), 0usize);
            for r in &records {
                let ids = caption_decode(&model.backbone, head, &p, &model.config.caption, &image_batch(&[r]))?;
                let text = vocab.detokenize(&ids);
                exact += usize::from(text == r.caption);
                cands.push(words(&text));
                refs.push(words(&r.caption));
            }
            report.insert("bleu4".into(), bleu4(&cands, &refs));
            report.insert("caption.exact_match".into(), exact as f64 / records.len() as f64);
        }
        Task::Grounding => {
            require_boxes(&records, false)?;
            let phrase = grounding_eval(&model, &records, false)?;
            let prompt = grounding_eval(&model, &records, true)?;
            report.insert("grounding.r1".into(), phrase.recall[0]);
            report.insert("grounding.r5".into(), phrase.recall[1]);
            report.insert("grounding.r10".into(), phrase.recall[2]);
            report.insert("detection.ap50".into(), prompt.ap);
        }
    }
    pass_counts(&model, &mut report);
    for (name, value) in &report {
        log.log(step, name, *value)?;
    }
    log.flush()?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.file(REPORT_FILE), json + "\n")?;
    Ok(report)
}
