//! Progressive multi-scale inference, the whole-cloud baseline, latency
//! bounds and pairwise-work accounting.
//!
//! Scale 1 is encoded and decoded directly. Every later scale is encoded,
//! fused against the store of all earlier (fused) features, decoded, and its
//! fused features appended to the store. Encoders depend only on their own
//! partition, so the threaded schedule runs them concurrently and lets the
//! decoder of scale `i` overlap the fusion of scale `i + 1`; the store is
//! the only serialization point.

use std::fmt::Write as _;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::backbone::{Encoding, FeatureMatrix, Prediction, ScaleModel};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::fusion::{FusedFeatureStore, FusionOutput};
use crate::partition::PartitionSet;

/// Pairwise-work accounting for a list of partition sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComplexityEstimate {
    pub sizes: Vec<u64>,
    /// `N^2` with `N = sum N_i`.
    pub whole_cost: u128,
    /// `sum N_i^2`.
    pub scalable_cost: u128,
    /// Cross-partition work `sum_{k != p} N_k N_p`, removed by processing partitions separately.
    pub gain: u128,
}

impl ComplexityEstimate {
    /// `sum N_i^2 / N^2`.
    pub fn scalable_fraction(&self) -> f64 {
        if self.whole_cost == 0 {
            return 1.0;
        }
        self.scalable_cost as f64 / self.whole_cost as f64
    }

    pub fn gain_fraction(&self) -> f64 {
        1.0 - self.scalable_fraction()
    }
}

pub fn estimate_gain(sizes: &[u64]) -> Result<ComplexityEstimate> {
    if sizes.is_empty() {
        return Err(Error::Empty("size list".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Config("partition sizes must be positive".into()));
    }
    let n: u128 = sizes.iter().map(|&s| s as u128).sum();
    let scalable_cost = sizes.iter().map(|&s| (s as u128) * (s as u128)).sum();
    let mut cross = 0u128;
    for (k, &a) in sizes.iter().enumerate() {
        for &b in &sizes[k + 1..] {
            cross += a as u128 * b as u128;
        }
    }
    Ok(ComplexityEstimate {
        sizes: sizes.to_vec(),
        whole_cost: n * n,
        scalable_cost,
        gain: 2 * cross,
    })
}

/// Upper and lower latency bounds for a sequence of per-scale processing times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatencyBounds {
    /// All data present at t = 0, scales processed back to back.
    pub cumulative: Vec<Duration>,
    /// Absolute completion time when scale `i` starts at `max(arrival_i, completion_{i-1})`.
    pub completion: Vec<Duration>,
    /// `completion_i - arrival_i`: latency after scale `i`'s data became available.
    pub pipelined: Vec<Duration>,
}

pub fn latency_bounds(durations: &[Duration], arrivals: &[Duration]) -> Result<LatencyBounds> {
    if durations.len() != arrivals.len() {
        return Err(Error::ArrivalTimes(format!(
            "{} arrival times for {} scales",
            arrivals.len(),
            durations.len()
        )));
    }
    if arrivals.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::ArrivalTimes("arrival times must be non-decreasing".into()));
    }
    let mut cumulative = Vec::with_capacity(durations.len());
    let mut completion = Vec::with_capacity(durations.len());
    let mut pipelined = Vec::with_capacity(durations.len());
    let (mut total, mut finish) = (Duration::ZERO, Duration::ZERO);
    for (&d, &a) in durations.iter().zip(arrivals) {
        total += d;
        finish = finish.max(a) + d;
        cumulative.push(total);
        completion.push(finish);
        pipelined.push(finish - a);
    }
    Ok(LatencyBounds {
        cumulative,
        completion,
        pipelined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Sequential,
    Threaded,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    /// Per-scale data arrival times; `None` means everything is present at t = 0.
    pub arrival_times: Option<Vec<Duration>>,
    pub fusion_enabled: bool,
    pub schedule: Schedule,
    /// Run once untimed before the measured run.
    pub warmup: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            arrival_times: None,
            fusion_enabled: true,
            schedule: Schedule::Sequential,
            warmup: false,
        }
    }
}

/// Prediction `Y_i` for the points of partition `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOutput {
    pub scale_id: usize,
    pub indices: Vec<usize>,
    pub prediction: Prediction,
}

/// One line of the timing report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRecord {
    pub scale: usize,
    pub n_points: usize,
    pub n_encoded: usize,
    pub encode_ms: f64,
    pub fuse_ms: f64,
    pub decode_ms: f64,
    pub cumulative_ms: f64,
    pub arrival_ms: f64,
    pub completion_ms: f64,
    pub pipelined_ms: f64,
    pub distance_evals: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub scales: Vec<ScaleRecord>,
    /// Wall time from start until `Y_1` was available.
    pub first_prediction_ms: f64,
    /// Wall time until every scale finished.
    pub total_ms: f64,
}

fn ms(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

impl TimingReport {
    pub fn total_distance_evals(&self) -> u64 {
        self.scales.iter().map(|s| s.distance_evals).sum()
    }

    /// One JSON object per scale, newline separated.
    pub fn to_jsonl(&self) -> String {
        self.scales
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n")
            .collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>9} {:>9} {:>10} {:>9} {:>10} {:>13} {:>13} {:>13} {:>14}",
            "scale", "points", "encoded", "encode_ms", "fuse_ms", "decode_ms", "cumulative_ms",
            "completion_ms", "pipelined_ms", "distance_evals"
        );
        for r in &self.scales {
            let _ = writeln!(
                out,
                "{:>5} {:>9} {:>9} {:>10.3} {:>9.3} {:>10.3} {:>13.3} {:>13.3} {:>13.3} {:>14}",
                r.scale,
                r.n_points,
                r.n_encoded,
                r.encode_ms,
                r.fuse_ms,
                r.decode_ms,
                r.cumulative_ms,
                r.completion_ms,
                r.pipelined_ms,
                r.distance_evals
            );
        }
        let _ = writeln!(
            out,
            "first prediction after {:.3} ms, all scales after {:.3} ms",
            self.first_prediction_ms, self.total_ms
        );
        out
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub outputs: Vec<ScaleOutput>,
    pub report: TimingReport,
}

impl PipelineOutput {
    /// `(source index, predicted label)` over all scales, partition order.
    pub fn labeled_points(&self) -> Vec<(usize, u16)> {
        self.outputs
            .iter()
            .flat_map(|o| o.indices.iter().copied().zip(o.prediction.labels.iter().copied()))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
struct StepTimes {
    encode: Duration,
    fuse: Duration,
    decode: Duration,
    evals: u64,
    n_encoded: usize,
}

fn check_models(models: &[ScaleModel], parts: &PartitionSet) -> Result<()> {
    if models.len() != parts.num_scales() {
        return Err(Error::ModelCountMismatch {
            expected: parts.num_scales(),
            got: models.len(),
        });
    }
    for (i, m) in models.iter().enumerate() {
        if m.scale_id != i + 1 {
            return Err(Error::Config(format!(
                "model at position {} is for scale {}",
                i + 1,
                m.scale_id
            )));
        }
    }
    Ok(())
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn wants_fusion(model: &ScaleModel, store: &FusedFeatureStore, enabled: bool) -> bool {
    enabled && model.has_fusion() && !store.is_empty()
}

/// Run the progressive pipeline over every scale of `parts`.
pub fn run_pipeline(
    models: &[ScaleModel],
    cloud: &PointCloud,
    parts: &PartitionSet,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    check_models(models, parts)?;
    let arrivals = match &opts.arrival_times {
        Some(a) => a.clone(),
        None => vec![Duration::ZERO; parts.num_scales()],
    };
    if arrivals.len() != parts.num_scales() {
        return Err(Error::ArrivalTimes(format!(
            "{} arrival times for {} scales",
            arrivals.len(),
            parts.num_scales()
        )));
    }
    if arrivals.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::ArrivalTimes("arrival times must be non-decreasing".into()));
    }
    let clouds = parts
        .partitions
        .iter()
        .map(|idx| cloud.gather(idx))
        .collect::<Result<Vec<_>>>()?;

    if opts.warmup {
        run_sequential(models, &clouds, opts.fusion_enabled)?;
    }
    let (outputs, times, first, total) = match opts.schedule {
        Schedule::Sequential => run_sequential(models, &clouds, opts.fusion_enabled)?,
        Schedule::Threaded => run_threaded(models, &clouds, opts.fusion_enabled)?,
    };

    let durations: Vec<Duration> = times.iter().map(|t| t.encode + t.fuse + t.decode).collect();
    let bounds = latency_bounds(&durations, &arrivals)?;
    let scales = times
        .iter()
        .enumerate()
        .map(|(i, t)| ScaleRecord {
            scale: i + 1,
            n_points: parts.partitions[i].len(),
            n_encoded: t.n_encoded,
            encode_ms: ms(t.encode),
            fuse_ms: ms(t.fuse),
            decode_ms: ms(t.decode),
            cumulative_ms: ms(bounds.cumulative[i]),
            arrival_ms: ms(arrivals[i]),
            completion_ms: ms(bounds.completion[i]),
            pipelined_ms: ms(bounds.pipelined[i]),
            distance_evals: t.evals,
        })
        .collect();
    let outputs = outputs
        .into_iter()
        .enumerate()
        .map(|(i, prediction)| ScaleOutput {
            scale_id: i + 1,
            indices: parts.partitions[i].clone(),
            prediction,
        })
        .collect();
    Ok(PipelineOutput {
        outputs,
        report: TimingReport {
            scales,
            first_prediction_ms: ms(first),
            total_ms: ms(total),
        },
    })
}

fn empty_prediction(model: &ScaleModel) -> Prediction {
    Prediction::from_logits(crate::tensor::Matrix::zeros(0, model.config.num_classes))
}

type RunResult = (Vec<Prediction>, Vec<StepTimes>, Duration, Duration);

fn run_sequential(models: &[ScaleModel], clouds: &[PointCloud], fusion: bool) -> Result<RunResult> {
    let start = Instant::now();
    let mut first = None;
    let mut store = FusedFeatureStore::new(models[0].config.feature_dim);
    let mut preds = Vec::with_capacity(models.len());
    let mut times = Vec::with_capacity(models.len());
    for (model, part) in models.iter().zip(clouds) {
        let mut t = StepTimes::default();
        if part.is_empty() {
            preds.push(empty_prediction(model));
            times.push(t);
            continue;
        }
        let (encoding, d) = timed(|| model.encode(part, false));
        let encoding = encoding?;
        t.encode = d;
        let alpha = encoding.features();
        t.n_encoded = alpha.len();
        let fused = if wants_fusion(model, &store, fusion) {
            let (f, d) = timed(|| model.fuse(&store, &alpha, false));
            t.fuse = d;
            f?
        } else {
            None
        };
        let top = fused.as_ref().map_or(&alpha, |f| &f.fused);
        let (decoded, d) = timed(|| model.decode(&encoding, top, false));
        let decoded = decoded?;
        t.decode = d;
        t.evals = encoding.distance_evals
            + fused.as_ref().map_or(0, |f| f.distance_evals)
            + decoded.distance_evals;
        store.push(top)?;
        first.get_or_insert_with(|| start.elapsed());
        preds.push(decoded.prediction);
        times.push(t);
    }
    let total = start.elapsed();
    Ok((preds, times, first.unwrap_or(total), total))
}

fn run_threaded(models: &[ScaleModel], clouds: &[PointCloud], fusion: bool) -> Result<RunResult> {
    let start = Instant::now();
    thread::scope(|scope| -> Result<RunResult> {
        let encoders: Vec<_> = models
            .iter()
            .zip(clouds)
            .map(|(model, part)| {
                scope.spawn(move || -> Result<Option<(Encoding, Duration)>> {
                    if part.is_empty() {
                        return Ok(None);
                    }
                    let (enc, d) = timed(|| model.encode(part, false));
                    Ok(Some((enc?, d)))
                })
            })
            .collect();

        let mut store = FusedFeatureStore::new(models[0].config.feature_dim);
        let mut decoders = Vec::with_capacity(models.len());
        let mut times = vec![StepTimes::default(); models.len()];
        for (i, (model, handle)) in models.iter().zip(encoders).enumerate() {
            let encoded = handle
                .join()
                .map_err(|_| Error::Invariant("encoder thread panicked".into()))??;
            let Some((encoding, d)) = encoded else {
                decoders.push(None);
                continue;
            };
            times[i].encode = d;
            let alpha = encoding.features();
            times[i].n_encoded = alpha.len();
            let fused: Option<FusionOutput> = if wants_fusion(model, &store, fusion) {
                let (f, d) = timed(|| model.fuse(&store, &alpha, false));
                times[i].fuse = d;
                f?
            } else {
                None
            };
            let fusion_evals = fused.as_ref().map_or(0, |f| f.distance_evals);
            let top: FeatureMatrix = fused.map_or(alpha, |f| f.fused);
            store.push(&top)?;
            decoders.push(Some(scope.spawn(move || {
                let (dec, d) = timed(|| model.decode(&encoding, &top, false));
                let done = start.elapsed();
                dec.map(|dec| (dec, d, done, encoding.distance_evals + fusion_evals))
            })));
        }

        let mut preds = Vec::with_capacity(models.len());
        let mut first = None;
        for (i, handle) in decoders.into_iter().enumerate() {
            match handle {
                None => preds.push(empty_prediction(&models[i])),
                Some(h) => {
                    let (dec, d, done, evals) = h
                        .join()
                        .map_err(|_| Error::Invariant("decoder thread panicked".into()))??;
                    times[i].decode = d;
                    times[i].evals = evals + dec.distance_evals;
                    first.get_or_insert(done);
                    preds.push(dec.prediction);
                }
            }
        }
        let total = start.elapsed();
        Ok((preds, times, first.unwrap_or(total), total))
    })
}

/// Store of (fused) features produced by `models` on their partitions, as
/// seen by the scale that follows them.
pub fn lower_scale_store(
    models: &[ScaleModel],
    cloud: &PointCloud,
    parts: &PartitionSet,
    fusion_enabled: bool,
) -> Result<FusedFeatureStore> {
    let dim = models
        .first()
        .map(|m| m.config.feature_dim)
        .ok_or_else(|| Error::Empty("no lower-scale models".into()))?;
    let mut store = FusedFeatureStore::new(dim);
    for (i, model) in models.iter().enumerate() {
        let part = cloud.gather(&parts.partitions[i])?;
        if part.is_empty() {
            continue;
        }
        let encoding = model.encode(&part, false)?;
        let alpha = encoding.features();
        let top = if wants_fusion(model, &store, fusion_enabled) {
            model
                .fuse(&store, &alpha, false)?
                .map_or(alpha, |f| f.fused)
        } else {
            alpha
        };
        store.push(&top)?;
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub indices: Vec<usize>,
    pub prediction: Prediction,
    pub wall: Duration,
    pub distance_evals: u64,
    pub n_encoded: usize,
}

/// One non-scalable pass over the union of partitions `1..=upto_scale`.
pub fn run_baseline(
    model: &ScaleModel,
    cloud: &PointCloud,
    parts: &PartitionSet,
    upto_scale: usize,
) -> Result<BaselineOutput> {
    if upto_scale == 0 || upto_scale > parts.num_scales() {
        return Err(Error::Config(format!(
            "baseline scale {upto_scale} outside 1..={}",
            parts.num_scales()
        )));
    }
    if model.has_fusion() {
        return Err(Error::Config("baseline model must not have a fusion block".into()));
    }
    let indices = parts.union_upto(upto_scale);
    let input = cloud.gather(&indices)?;
    let start = Instant::now();
    let encoding = model.encode(&input, false)?;
    let alpha = encoding.features();
    let decoded = model.decode(&encoding, &alpha, false)?;
    let wall = start.elapsed();
    Ok(BaselineOutput {
        indices,
        prediction: decoded.prediction,
        wall,
        distance_evals: encoding.distance_evals + decoded.distance_evals,
        n_encoded: alpha.len(),
    })
}
