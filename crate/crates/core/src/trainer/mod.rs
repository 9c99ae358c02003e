//! Joint multi-task training: one batch per dataset per step, weighted loss
//! sum, one optimizer update.

pub mod adam;
pub mod checkpoint;
pub mod weights;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use numerics::{Tensor, Var};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{G2p, SupervisedExample, UnsupervisedAudio, UnsupervisedText, WordpieceModel};
use crate::frontends::{mask_span_len, stack_and_subsample, FeatureSequence, StackedFeatures};
use crate::model::{asr_losses, encode, init_params, ModelConfig, CAUSAL_DECODER, NONCAUSAL_DECODER};
use crate::transducer::transducer_loss;
use crate::params::{Ctx, ParamStore};
use crate::ssl::{bestrq_forward, joist_forward, Quantizer, TextToSpeech};
use crate::{seed, Error, Result};

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use weights::{resolve_weights, Experiment, Task, TaskWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_supervised: usize,
    pub batch_audio: usize,
    pub batch_text: usize,
    pub adam: AdamConfig,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_supervised: 8,
            batch_audio: 8,
            batch_text: 8,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
            threads: 1,
        }
    }
}

pub struct SupItem {
    pub id: String,
    pub features: StackedFeatures,
    pub labels: Vec<u32>,
}

pub struct TextItem {
    pub id: String,
    pub words: Vec<String>,
}

/// Training inputs after deterministic preprocessing.
pub struct TrainData {
    pub supervised: Vec<SupItem>,
    pub audio: Vec<FeatureSequence>,
    pub text: Vec<TextItem>,
    pub g2p: G2p,
    pub wordpieces: WordpieceModel,
    pub tts: Option<Box<dyn TextToSpeech>>,
}

impl TrainData {
    pub fn prepare(
        cfg: &ModelConfig,
        supervised: &[SupervisedExample],
        audio: &[UnsupervisedAudio],
        text: &[UnsupervisedText],
        g2p: G2p,
        wordpieces: WordpieceModel,
        tts: Option<Box<dyn TextToSpeech>>,
    ) -> Result<Self> {
        let f = &cfg.frontend;
        let mut sup = Vec::with_capacity(supervised.len());
        for e in supervised {
            let features = stack_and_subsample(&e.audio, f.stack, f.stride)?;
            let labels = wordpieces.encode(&e.text);
            if labels.is_empty() || labels.len() > cfg.max_symbols * features.len() {
                return Err(Error::usage(format!(
                    "example `{}`: {} wordpieces over {} frames violates the symbol cap",
                    e.id,
                    labels.len(),
                    features.len()
                )));
            }
            sup.push(SupItem {
                id: e.id.clone(),
                features,
                labels,
            });
        }
        Ok(Self {
            supervised: sup,
            audio: audio.iter().map(|a| a.audio.clone()).collect(),
            text: text
                .iter()
                .filter(|t| !t.text.is_empty())
                .map(|t| TextItem {
                    id: t.id.clone(),
                    words: t.text.clone(),
                })
                .collect(),
            g2p,
            wordpieces,
            tts,
        })
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub store: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub quantizer: Quantizer,
}

impl TrainState {
    pub fn fresh(cfg: &ModelConfig, master_seed: u64) -> Result<Self> {
        let store = init_params(cfg, master_seed)?;
        let quantizer = Quantizer::from_store(&store)?;
        Ok(Self {
            step: 0,
            store,
            adam: AdamState::default(),
            rng: seed::rng(seed::derive(master_seed, "trainer")),
            quantizer,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<Self> {
        ckpt.check_compatible(cfg)?;
        Ok(Self {
            step: ckpt.step,
            store: ckpt.store.clone(),
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.clone(),
            quantizer: Quantizer::from_store(&ckpt.store)?,
        })
    }

    pub fn checkpoint(&self, cfg: &ModelConfig) -> Checkpoint {
        Checkpoint {
            step: self.step,
            store: self.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            config_text: cfg.canonical_text(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Mean loss of every task evaluated this step, in task order.
    pub losses: Vec<(Task, f64)>,
    pub total: f64,
}

#[derive(Clone, Copy)]
enum Job {
    Supervised { item: usize },
    Joist { item: usize, slot: u64 },
    Tts { item: usize },
    Bestrq { item: usize, slot: u64 },
}

struct JobOut {
    losses: Vec<(Task, f64)>,
    objective: f64,
    grads: BTreeMap<String, Tensor>,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

fn batch_rng(step_seed: u64, dataset: &str) -> ChaCha8Rng {
    seed::rng(seed::derive(step_seed, dataset))
}

struct Coefficients {
    casr: f64,
    ncasr: f64,
    cjoist: f64,
    ncjoist: f64,
    tts: f64,
    bestrq: f64,
}

fn weighted(ctx: &mut Ctx, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, c) in terms {
        let s = ctx.g.scale(v, c);
        acc = Some(match acc {
            None => s,
            Some(a) => ctx.g.add(a, s)?,
        });
    }
    acc.ok_or_else(|| Error::usage("job with no active loss"))
}

fn tag(e: Error, task: Task) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("task `{task}`: {m}")),
        other => other,
    }
}

fn run_job(
    job: Job,
    cfg: &ModelConfig,
    data: &TrainData,
    state: &TrainState,
    co: &Coefficients,
    step_seed: u64,
) -> Result<Option<JobOut>> {
    let mut ctx = Ctx::train(&state.store);
    let mut losses = Vec::new();
    let mut terms = Vec::new();
    match job {
        Job::Supervised { item } => {
            let it = &data.supervised[item];
            let x = ctx.constant(it.features.frames.clone());
            let (hc, hnc) = encode(&mut ctx, cfg, x)?;
            for (task, h, p, c) in [
                (Task::Casr, hc, CAUSAL_DECODER, co.casr),
                (Task::Ncasr, hnc, NONCAUSAL_DECODER, co.ncasr),
            ] {
                if c > 0.0 {
                    let v = transducer_loss(&mut ctx, h, &it.labels, p, cfg.max_symbols).map_err(|e| tag(e, task))?;
                    losses.push((task, ctx.scalar(v)));
                    terms.push((v, c));
                }
            }
        }
        Job::Joist { item, slot } => {
            let mut rng = seed::rng(seed::derive_indexed(step_seed, "joist.mask", slot));
            let t = &data.text[item];
            let out = joist_forward(&mut ctx, cfg, &data.g2p, &data.wordpieces, &t.words, &mut rng)?;
            for (task, v, c) in [
                (Task::Cjoist, out.causal, co.cjoist),
                (Task::Ncjoist, out.noncausal, co.ncjoist),
            ] {
                if c > 0.0 {
                    losses.push((task, ctx.scalar(v)));
                    terms.push((v, c));
                }
            }
        }
        Job::Tts { item } => {
            let tts = data
                .tts
                .as_ref()
                .ok_or_else(|| Error::usage("TTS augmentation is weighted but no synthesizer is configured"))?;
            let t = &data.text[item];
            let audio = tts.synthesize(&t.words)?;
            let f = &cfg.frontend;
            let sf = stack_and_subsample(&audio, f.stack, f.stride)?;
            let labels = data.wordpieces.encode(&t.words);
            if labels.len() > cfg.max_symbols * sf.len() {
                return Ok(None);
            }
            let x = ctx.constant(sf.frames);
            let (lc, lnc) = asr_losses(&mut ctx, cfg, x, &labels)?;
            let both = ctx.g.add(lc, lnc)?;
            let mean = ctx.g.scale(both, 0.5);
            losses.push((Task::Tts, ctx.scalar(mean)));
            terms.push((mean, co.tts));
        }
        Job::Bestrq { item, slot } => {
            let mut rng = seed::rng(seed::derive_indexed(step_seed, "bestrq.mask", slot));
            let Some(l) = bestrq_forward(&mut ctx, cfg, &state.quantizer, &data.audio[item], &mut rng)? else {
                return Ok(None);
            };
            losses.push((Task::Bestrq, ctx.scalar(l)));
            terms.push((l, co.bestrq));
        }
    }
    if let Some(&(task, v)) = losses.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!("task `{task}` produced a non-finite loss ({v})")));
    }
    let obj = weighted(&mut ctx, &terms)?;
    let objective = ctx.scalar(obj);
    let grads = ctx.gradients(obj)?;
    Ok(Some(JobOut {
        losses,
        objective,
        grads,
    }))
}

fn bestrq_usable(cfg: &ModelConfig, audio: &FeatureSequence) -> bool {
    let t = audio.len().div_ceil(cfg.frontend.stride);
    audio.len() > 0 && mask_span_len(cfg.frontend.mask_ratio_audio, t) > 0
}

fn text_usable(cfg: &ModelConfig, data: &TrainData, item: usize) -> bool {
    let t = &data.text[item];
    let labels = data.wordpieces.encode(&t.words);
    let ph = data.g2p.grapheme_to_phoneme(&t.words);
    !labels.is_empty() && !ph.is_empty() && labels.len() <= cfg.max_symbols * cfg.frontend.upsample * ph.len()
}

/// One joint update. Tasks with zero weight are never evaluated.
pub fn train_step(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    weights: &TaskWeights,
    pool: &rayon::ThreadPool,
) -> Result<StepReport> {
    let step_seed = state.rng.next_u64();
    let w = |t: Task| weights.get(t);
    let mut jobs = Vec::new();
    let mut counts = [0usize; 6];

    if w(Task::Casr) > 0.0 || w(Task::Ncasr) > 0.0 {
        if data.supervised.is_empty() {
            return Err(Error::usage("supervised corpus is empty"));
        }
        let mut r = batch_rng(step_seed, "batch.supervised");
        for item in sample(&mut r, data.supervised.len(), tcfg.batch_supervised) {
            jobs.push(Job::Supervised { item });
        }
        counts[Task::Casr.index()] = tcfg.batch_supervised;
        counts[Task::Ncasr.index()] = tcfg.batch_supervised;
    }
    let joist = w(Task::Cjoist) > 0.0 || w(Task::Ncjoist) > 0.0;
    if joist || w(Task::Tts) > 0.0 {
        if data.text.is_empty() {
            return Err(Error::usage("text corpus is empty"));
        }
        let mut r = batch_rng(step_seed, "batch.text");
        let batch = sample(&mut r, data.text.len(), tcfg.batch_text);
        if joist {
            for (slot, &item) in batch.iter().enumerate() {
                if text_usable(cfg, data, item) {
                    jobs.push(Job::Joist { item, slot: slot as u64 });
                    counts[Task::Cjoist.index()] += 1;
                    counts[Task::Ncjoist.index()] += 1;
                }
            }
        }
        if w(Task::Tts) > 0.0 {
            for &item in &batch {
                jobs.push(Job::Tts { item });
            }
        }
    }
    if w(Task::Bestrq) > 0.0 {
        if data.audio.is_empty() {
            return Err(Error::usage("unpaired audio corpus is empty"));
        }
        let mut r = batch_rng(step_seed, "batch.audio");
        for (slot, item) in sample(&mut r, data.audio.len(), tcfg.batch_audio).into_iter().enumerate() {
            if bestrq_usable(cfg, &data.audio[item]) {
                jobs.push(Job::Bestrq { item, slot: slot as u64 });
                counts[Task::Bestrq.index()] += 1;
            }
        }
    }
    // TTS examples that break the symbol cap are dropped after synthesis.
    let tts_valid: Vec<bool> = if w(Task::Tts) > 0.0 {
        let tts = data
            .tts
            .as_ref()
            .ok_or_else(|| Error::usage("TTS augmentation is weighted but no synthesizer is configured"))?;
        jobs.iter()
            .map(|j| match *j {
                Job::Tts { item, .. } => {
                    let words = &data.text[item].words;
                    match tts.synthesize(words) {
                        Ok(a) if !a.is_empty() => {
                            let frames = a.len().div_ceil(cfg.frontend.stride);
                            data.wordpieces.encode(words).len() <= cfg.max_symbols * frames
                        }
                        _ => false,
                    }
                }
                _ => true,
            })
            .collect()
    } else {
        vec![true; jobs.len()]
    };
    let jobs: Vec<Job> = jobs
        .into_iter()
        .zip(&tts_valid)
        .filter(|(_, &ok)| ok)
        .map(|(j, _)| j)
        .collect();
    counts[Task::Tts.index()] = jobs.iter().filter(|j| matches!(j, Job::Tts { .. })).count();

    let coef = |t: Task| {
        let n = counts[t.index()];
        if n == 0 {
            0.0
        } else {
            w(t) / n as f64
        }
    };
    let co = Coefficients {
        casr: coef(Task::Casr),
        ncasr: coef(Task::Ncasr),
        cjoist: coef(Task::Cjoist),
        ncjoist: coef(Task::Ncjoist),
        tts: coef(Task::Tts),
        bestrq: coef(Task::Bestrq),
    };

    let outs: Vec<Result<Option<JobOut>>> = {
        let st: &TrainState = state;
        pool.install(|| {
            jobs.par_iter()
                .map(|&j| run_job(j, cfg, data, st, &co, step_seed))
                .collect()
        })
    };

    let mut sums = [0.0f64; 6];
    let mut seen = [0usize; 6];
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    for out in outs {
        let Some(out) = out? else { continue };
        for (t, v) in out.losses {
            sums[t.index()] += v;
            seen[t.index()] += 1;
        }
        total += out.objective;
        for (name, g) in out.grads {
            match grads.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
    }
    state.adam.update(&tcfg.adam, &mut state.store, &grads);
    state.step += 1;
    let losses = Task::ALL
        .into_iter()
        .filter(|t| seen[t.index()] > 0)
        .map(|t| (t, sums[t.index()] / seen[t.index()] as f64))
        .collect();
    Ok(StepReport {
        step: state.step,
        losses,
        total,
    })
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot build thread pool: {e}")))
}

/// `step,task,loss` lines.
pub fn loss_log_csv(reports: &[StepReport]) -> String {
    let mut out = String::from("step,task,loss\n");
    for r in reports {
        for (t, v) in &r.losses {
            let _ = writeln!(out, "{},{},{:?}", r.step, t, v);
        }
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepReport>,
}

/// Runs `tcfg.steps` updates from `init` (or fresh parameters). With an
/// output directory, writes `losses.csv`, periodic `checkpoint.bin` files
/// and, on a numeric failure, `last_good.bin`.
#[allow(clippy::too_many_arguments)]
pub fn run_training(
    experiment: Experiment,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    data: &TrainData,
    init: Option<&Checkpoint>,
    master_seed: u64,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    let weights = resolve_weights(experiment.label())?;
    let mut state = match init {
        Some(c) => TrainState::from_checkpoint(c, cfg)?,
        None => TrainState::fresh(cfg, master_seed)?,
    };
    let pool = thread_pool(tcfg.threads)?;
    let mut log = Vec::new();
    let write = |state: &TrainState, log: &[StepReport], name: &str| -> Result<()> {
        if let Some(dir) = out_dir {
            state.checkpoint(cfg).save(&dir.join(name))?;
            let p = dir.join("losses.csv");
            std::fs::write(&p, loss_log_csv(log)).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    for _ in 0..tcfg.steps {
        let before = state.clone();
        match train_step(&mut state, data, cfg, tcfg, &weights, &pool) {
            Ok(r) => {
                progress(&r);
                log.push(r);
            }
            Err(e) => {
                if matches!(e, Error::Numeric(_)) {
                    write(&before, &log, "last_good.bin")?;
                }
                return Err(e);
            }
        }
        if tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 {
            write(&state, &log, "checkpoint.bin")?;
        }
    }
    write(&state, &log, "checkpoint.bin")?;
    Ok(TrainOutcome {
        checkpoint: state.checkpoint(cfg),
        log,
    })
}

/// Mean causal and non-causal losses over fixed items, without updating.
pub fn supervised_loss(store: &ParamStore, cfg: &ModelConfig, items: &[SupItem]) -> Result<(f64, f64)> {
    let mut c = 0.0;
    let mut nc = 0.0;
    for it in items {
        let mut ctx = Ctx::infer(store);
        let x = ctx.constant(it.features.frames.clone());
        let (lc, lnc) = asr_losses(&mut ctx, cfg, x, &it.labels)?;
        c += ctx.scalar(lc);
        nc += ctx.scalar(lnc);
    }
    let n = items.len().max(1) as f64;
    Ok((c / n, nc / n))
}
