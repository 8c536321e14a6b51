//! Training loop, evaluation and the JSON-lines metrics log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{collate, generate_dataset, load_dataset, split_dataset, Sample, Splits};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, IouAccumulator};
use crate::objective::{multiscale_loss, LossReport, ObjectiveConfig};
use crate::optim::Adam;
use crate::params::ModelParams;
use crate::segnet::{predict_mask, SegNet};
use crate::text::{build_vocab, tokenize, Vocab};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "metrics.jsonl";
/// Samples per inference batch during evaluation.
pub const EVAL_BATCH: usize = 32;

/// Random stream `stream` of a run seeded by `seed`.
pub fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train, val or test)"
            ))),
        }
    }
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Loads or synthesizes the configured dataset and splits it.
pub fn prepare_data(cfg: &RunConfig) -> Result<Splits> {
    let samples = match &cfg.data {
        DataSource::Synth(s) => generate_dataset(&s.generator, s.n, s.seed)?,
        DataSource::Path(p) => load_dataset(p)?,
    };
    let [h, w] = cfg.net.image_size;
    if let Some(bad) = samples.iter().find(|s| s.size() != (h, w)) {
        return Err(Error::Load {
            record: bad.id.clone(),
            reason: format!("image is {:?}, configuration expects {h}x{w}", bad.size()),
        });
    }
    split_dataset(samples, cfg.split, cfg.split_seed)
}

pub fn encode_expressions(
    samples: &[Sample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    samples
        .iter()
        .map(|s| {
            tokenize(&s.expression, vocab, max_len)
                .map_err(|e| e.context(format!("sample {}", s.id)))
        })
        .collect()
}

/// One forward/backward pass and Adam update on `batch`. Batch-norm running
/// statistics are updated from the batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    net: &SegNet,
    params: &mut ModelParams,
    opt: &mut Adam,
    objective: &ObjectiveConfig,
    batch: &[&Sample],
    ids: &[Vec<usize>],
    rng: &mut R,
) -> Result<LossReport> {
    let (images, masks, ignore) = collate(batch)?;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let out = net.forward(&mut tape, &b, params, &images, ids, true, rng)?;
    let (loss, report) = multiscale_loss(&mut tape, &out, &masks, ignore.as_ref(), objective)?;
    if !report.total.is_finite() {
        return Ok(report);
    }
    let grads = tape.backward(loss)?;
    let grads = params.collect_grads(&b, &grads);
    opt.step(params, &grads)?;
    params.apply_batch_stats(&out.batch_stats)?;
    Ok(report)
}

/// Per-example and pooled IoU of thresholded predictions.
pub struct Evaluation {
    pub report: EvalReport,
    pub per_example: Vec<f64>,
    /// Pooled IoU over relational-template samples, if any.
    pub relational_iou: Option<f64>,
}

pub fn evaluate(
    net: &SegNet,
    params: &ModelParams,
    vocab: &Vocab,
    samples: &[Sample],
    threshold: f64,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let ids = encode_expressions(samples, vocab, net.config().max_len)?;
    let mut all = IouAccumulator::new();
    let mut rel = IouAccumulator::new();
    for (chunk, chunk_ids) in samples.chunks(EVAL_BATCH).zip(ids.chunks(EVAL_BATCH)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _, _) = collate(&refs)?;
        let prob = net.predict_proba(params, &images, chunk_ids)?;
        let mask = predict_mask(&prob, threshold)?;
        let plane = mask.numel() / chunk.len();
        for (s, m) in chunk.iter().zip(mask.data().chunks(plane)) {
            let pred: Vec<bool> = m.iter().map(|&v| v != 0.0).collect();
            let gt = s.mask_bits();
            let ig = s.ignore_bits();
            all.add(&pred, &gt, ig.as_deref())?;
            if s.is_relational() {
                rel.add(&pred, &gt, ig.as_deref())?;
            }
        }
    }
    Ok(Evaluation {
        report: all.report()?,
        per_example: all.per_example().to_vec(),
        relational_iou: (!rel.is_empty()).then(|| rel.overall()),
    })
}

/// Appends JSON records with a strictly increasing `seq` field.
struct MetricsLog {
    out: Option<BufWriter<File>>,
    seq: u64,
}

impl MetricsLog {
    fn new(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(BufWriter::new(
                File::create(p).map_err(|e| Error::io(p, e))?,
            )),
            None => None,
        };
        Ok(MetricsLog { out, seq: 0 })
    }

    fn write(&mut self, mut record: serde_json::Value) -> Result<()> {
        record["seq"] = json!(self.seq);
        self.seq += 1;
        if let Some(out) = &mut self.out {
            writeln!(out, "{record}").map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io(LOG_FILE, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub train_loss: f64,
    pub val: serde_json::Value,
    pub val_iou: f64,
}

pub struct TrainOutcome {
    /// Snapshot with the best validation overall IoU.
    pub best: Checkpoint,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub splits: Splits,
}

/// Trains on the configured data. With `out_dir`, writes the best checkpoint
/// and the metrics log there.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = prepare_data(cfg)?;
    train_on(cfg, splits, out_dir)
}

/// [`train`] on pre-split data.
pub fn train_on(cfg: &RunConfig, splits: Splits, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    let log_path = out_dir.map(|d| d.join(LOG_FILE));
    let mut log = MetricsLog::new(log_path.as_deref())?;

    let corpus: Vec<&str> = splits.train.iter().map(|s| s.expression.as_str()).collect();
    let vocab = build_vocab(&corpus, 1)?;
    let train_ids = encode_expressions(&splits.train, &vocab, cfg.net.max_len)?;

    let net = SegNet::new(cfg.net.clone())?;
    let mut params = net.init_params(vocab.len(), &mut run_rng(cfg.seed, INIT_STREAM))?;
    let mut opt = Adam::new(cfg.optimizer.clone())?;
    let mut dropout_rng = run_rng(cfg.seed, DROPOUT_STREAM);
    let mut shuffle_rng = run_rng(cfg.seed, SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps_per_epoch.is_some_and(|m| epoch_steps >= m) {
                break;
            }
            let batch: Vec<&Sample> = idx.iter().map(|&i| &splits.train[i]).collect();
            let ids: Vec<Vec<usize>> = idx.iter().map(|&i| train_ids[i].clone()).collect();
            let report = train_step(
                &net,
                &mut params,
                &mut opt,
                &cfg.objective,
                &batch,
                &ids,
                &mut dropout_rng,
            )?;
            step += 1;
            epoch_steps += 1;
            if !report.total.is_finite() {
                log.write(json!({"kind": "abort", "step": step, "epoch": epoch, "loss": report.total.to_string()}))?;
                log.flush()?;
                return Err(Error::NonFiniteLoss { step, epoch });
            }
            losses.push(report.total);
            epoch_loss += report.total;
            log.write(json!({
                "kind": "step",
                "step": step,
                "epoch": epoch,
                "loss": report.total,
                "final_bce": report.final_term,
            }))?;
        }

        let mut snapshot = Checkpoint::new(cfg.clone(), vocab.clone(), &params, epoch, None);
        let eval = evaluate(
            &net,
            snapshot.params(),
            &vocab,
            &splits.val,
            cfg.eval_threshold,
        )?;
        let val_iou = eval.report.overall_iou;
        let summary = EpochSummary {
            epoch,
            step,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val: serde_json::to_value(&eval.report)?,
            val_iou,
        };
        let mut record = serde_json::to_value(&summary)?;
        record["kind"] = json!("epoch");
        log.write(record)?;
        log.flush()?;
        epochs.push(summary);

        if best
            .as_ref()
            .map_or(true, |b| val_iou > b.best_val.unwrap_or(f64::NEG_INFINITY))
        {
            snapshot.best_val = Some(val_iou);
            if let Some(p) = &ckpt_path {
                snapshot.save(p)?;
            }
            best = Some(snapshot);
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        losses,
        epochs,
        checkpoint_path: ckpt_path,
        log_path,
        splits,
    })
}

/// Evaluates a checkpoint on a split of the data described by its own
/// configuration.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, split: SplitName) -> Result<Evaluation> {
    let (net, params) = ckpt.model()?;
    let splits = prepare_data(&ckpt.config)?;
    evaluate(
        &net,
        params,
        &ckpt.vocab,
        splits.get(split),
        ckpt.config.eval_threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthSource;
    use crate::data::SynthConfig;
    use crate::segnet::NetConfig;

    fn smoke() -> RunConfig {
        RunConfig {
            net: NetConfig {
                depth: 2,
                channels: 8,
                image_size: [32, 32],
                backbone_channels: 8,
                embed_dim: 8,
                hidden: 8,
                ..NetConfig::default()
            },
            data: DataSource::Synth(SynthSource {
                n: 40,
                seed: 2,
                generator: SynthConfig {
                    canvas: [32, 32],
                    ..SynthConfig::default()
                },
            }),
            epochs: 2,
            batch_size: 8,
            split: [0.6, 0.2, 0.2],
            ..RunConfig::default()
        }
    }

    #[test]
    fn smoke_run_is_deterministic_and_keeps_best() {
        let dir = tempfile::tempdir().unwrap();
        let a = train(&smoke(), Some(dir.path())).unwrap();
        let b = train(&smoke(), None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.losses.len(), 6);
        let best = a
            .epochs
            .iter()
            .map(|e| e.val_iou)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.best_val, Some(best));
        let saved = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(saved, a.best);

        let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let recs: Vec<serde_json::Value> = log
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(recs.len(), 8);
        assert!(recs
            .windows(2)
            .all(|w| w[0]["seq"].as_u64() < w[1]["seq"].as_u64()));

        let r1 = evaluate_checkpoint(&saved, SplitName::Val).unwrap().report;
        let r2 = evaluate_checkpoint(&saved, SplitName::Val).unwrap().report;
        assert_eq!(r1, r2);
        assert_eq!(r1.overall_iou, best);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let mut cfg = smoke();
        cfg.epochs = 1;
        let mut splits = prepare_data(&cfg).unwrap();
        for s in &mut splits.train {
            s.image.data_mut()[0] = f64::NAN;
        }
        match train_on(&cfg, splits, None) {
            Err(Error::NonFiniteLoss { step, epoch }) => assert_eq!((step, epoch), (1, 1)),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("NaN input produced a finite loss"),
        }
    }
}
