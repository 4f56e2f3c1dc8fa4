//! Per-scale point-transformer-style network.
//!
//! Encoder: a two-layer embedding MLP on `xyzrgb`, then `encoder_stages`
//! stages of (grid pooling, KNN vector attention). Stage 0 runs at input
//! resolution; stage `k >= 1` pools at `base_voxel * downsample_factor^k`.
//!
//! Decoder: starting from the (optionally fused) last-stage features, each
//! level interpolates the coarser level onto its own points with
//! inverse-distance weights, concatenates the encoder skip features of that
//! level and applies `Linear(2F -> F)` + rectifier. A hidden layer and the
//! classifier head produce one row of logits per input point.
//!
//! All gradients are hand-derived; see [`ScaleModel::backward`].

mod attention;
pub mod checkpoint;
mod resample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{AttentionBlock, AttentionCache};
pub use resample::{grid_pool, Interpolation, Pooling, IDW_EPSILON};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_backward, FusedFeatureStore, FusionCache, FusionConfig, FusionWeights};
use crate::spatial::{NeighborIndex, SearchStrategy};
use crate::tensor::{relu, relu_backward, Linear, Matrix};

/// Number of input channels per point (`xyzrgb`).
pub const INPUT_CHANNELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub feature_dim: usize,
    pub attention_neighbors: usize,
    pub encoder_stages: usize,
    pub downsample_factor: f64,
    pub num_classes: usize,
    pub interp_neighbors: usize,
    pub search: SearchStrategy,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            attention_neighbors: 8,
            encoder_stages: 2,
            downsample_factor: 2.0,
            num_classes: 13,
            interp_neighbors: 3,
            search: SearchStrategy::KdTree,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if self.attention_neighbors == 0 {
            return bad("attention_neighbors must be at least 1");
        }
        if self.encoder_stages == 0 {
            return bad("encoder_stages must be at least 1");
        }
        if !(self.downsample_factor.is_finite() && self.downsample_factor > 0.0) {
            return bad("downsample_factor must be positive");
        }
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1");
        }
        if self.interp_neighbors == 0 {
            return bad("interp_neighbors must be at least 1");
        }
        Ok(())
    }

    /// Voxel size used by encoder stage `stage` (`None` for stage 0, which keeps input resolution).
    pub fn stage_voxel(&self, base_voxel: f64, stage: usize) -> Option<f64> {
        (stage > 0).then(|| base_voxel * self.downsample_factor.powi(stage as i32))
    }
}

/// Encoder output of one scale: features with the 3D positions they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub positions: Vec<[f64; 3]>,
    pub features: Matrix,
    pub scale_id: usize,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Matrix,
    pub labels: Vec<u16>,
}

impl Prediction {
    pub fn from_logits(logits: Matrix) -> Self {
        let labels = (0..logits.rows())
            .map(|r| argmax(logits.row(r)) as u16)
            .collect();
        Self { logits, labels }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trainable tensors of one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub embed: [Linear; 2],
    pub stages: Vec<AttentionBlock>,
    pub fusion: Option<FusionWeights>,
    /// `up[l]` produces decoder level `l` from `[interpolated | skip]`.
    pub up: Vec<Linear>,
    pub head_hidden: Linear,
    pub classifier: Linear,
}

impl Network {
    pub fn init(cfg: &BackboneConfig, with_fusion: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = cfg.feature_dim;
        let mut net = Self {
            embed: [
                Linear::init(INPUT_CHANNELS, f, &mut rng),
                Linear::init(f, f, &mut rng),
            ],
            stages: (0..cfg.encoder_stages)
                .map(|_| AttentionBlock::init(f, &mut rng))
                .collect(),
            fusion: None,
            up: (1..cfg.encoder_stages)
                .map(|_| Linear::init(2 * f, f, &mut rng))
                .collect(),
            head_hidden: Linear::init(f, f, &mut rng),
            classifier: Linear::init(f, cfg.num_classes, &mut rng),
        };
        // Drawn last, so a model with fusion shares every other weight with
        // the same-seed model without it.
        net.fusion = with_fusion.then(|| FusionWeights::init(f, &mut rng));
        net
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_linear_mut(|_, l| *l = l.zeros_like());
        z
    }

    pub fn for_each_linear(&self, mut f: impl FnMut(String, &Linear)) {
        f("embed.0".into(), &self.embed[0]);
        f("embed.1".into(), &self.embed[1]);
        for (s, block) in self.stages.iter().enumerate() {
            for (name, l) in block.linears() {
                f(format!("stage{s}.{name}"), l);
            }
        }
        if let Some(fw) = &self.fusion {
            f("fusion.pointwise".into(), &fw.pointwise);
            f("fusion.merge".into(), &fw.merge);
        }
        for (l, layer) in self.up.iter().enumerate() {
            f(format!("up{l}"), layer);
        }
        f("head.hidden".into(), &self.head_hidden);
        f("head.classifier".into(), &self.classifier);
    }

    pub fn for_each_linear_mut(&mut self, mut f: impl FnMut(String, &mut Linear)) {
        let [e0, e1] = &mut self.embed;
        f("embed.0".into(), e0);
        f("embed.1".into(), e1);
        for (s, block) in self.stages.iter_mut().enumerate() {
            for (name, l) in block.linears_mut() {
                f(format!("stage{s}.{name}"), l);
            }
        }
        if let Some(fw) = &mut self.fusion {
            f("fusion.pointwise".into(), &mut fw.pointwise);
            f("fusion.merge".into(), &mut fw.merge);
        }
        for (l, layer) in self.up.iter_mut().enumerate() {
            f(format!("up{l}"), layer);
        }
        f("head.hidden".into(), &mut self.head_hidden);
        f("head.classifier".into(), &mut self.classifier);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_linear(|_, l| n += l.num_params());
        n
    }

    /// All parameters flattened in a fixed order (weight then bias per layer).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_linear(|_, l| {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        });
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut at = 0;
        self.for_each_linear_mut(|_, l| {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        });
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.flat_params().iter().all(|v| v.is_finite())
    }
}

/// Weights and configuration of one scale, plus its frozen flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleModel {
    pub scale_id: usize,
    /// Voxel size of the partition this scale consumes.
    pub base_voxel: f64,
    pub config: BackboneConfig,
    pub fusion_config: FusionConfig,
    pub net: Network,
    frozen: bool,
}

impl ScaleModel {
    pub fn new(
        scale_id: usize,
        base_voxel: f64,
        config: BackboneConfig,
        k_fuse: usize,
        with_fusion: bool,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        crate::cloud::check_voxel_size(base_voxel)?;
        let fusion_config = FusionConfig::new(k_fuse, config.feature_dim)?;
        let net = Network::init(
            &config,
            with_fusion,
            seed ^ (scale_id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        Ok(Self {
            scale_id,
            base_voxel,
            config,
            fusion_config,
            net,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        scale_id: usize,
        base_voxel: f64,
        config: BackboneConfig,
        fusion_config: FusionConfig,
        net: Network,
        frozen: bool,
    ) -> Self {
        Self {
            scale_id,
            base_voxel,
            config,
            fusion_config,
            net,
            frozen,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn has_fusion(&self) -> bool {
        self.net.fusion.is_some()
    }

    /// Apply `params -= step` elementwise. Frozen models reject updates.
    pub fn apply_update(&mut self, step: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(self.scale_id));
        }
        let mut flat = self.net.flat_params();
        if step.len() != flat.len() {
            return Err(Error::Shape("update length".into()));
        }
        for (p, s) in flat.iter_mut().zip(step) {
            *p -= s;
        }
        self.net.set_flat_params(&flat)
    }

    /// Encoder: embedding then the attention stages.
    pub fn encode(&self, part: &PointCloud, record: bool) -> Result<Encoding> {
        if part.is_empty() {
            return Err(Error::Empty("cannot encode an empty partition".into()));
        }
        let cfg = &self.config;
        let n = part.len();
        let input = Matrix::from_vec(
            n,
            INPUT_CHANNELS,
            (0..n).flat_map(|i| part.xyzrgb(i)).collect(),
        );
        let e0 = self.net.embed[0].forward(&input);
        let h0 = relu(&e0);
        let e1 = self.net.embed[1].forward(&h0);
        let embedded = relu(&e1);

        let mut levels: Vec<EncoderLevel> = Vec::with_capacity(cfg.encoder_stages);
        let mut distance_evals = 0;
        for (stage, block) in self.net.stages.iter().enumerate() {
            let (prev_pos, prev_feat) = match levels.last() {
                Some(l) => (l.positions.as_slice(), &l.output),
                None => (part.positions(), &embedded),
            };
            let (positions, pooled, pooling) = match cfg.stage_voxel(self.base_voxel, stage) {
                Some(voxel) => {
                    let (p, f, pool) = grid_pool(prev_pos, prev_feat, voxel);
                    (p, f, Some(pool))
                }
                None => (prev_pos.to_vec(), prev_feat.clone(), None),
            };
            let index = NeighborIndex::build_with(&positions, cfg.search)?;
            let neighbors: Vec<Vec<usize>> = index
                .knn_batch(&positions, cfg.attention_neighbors)?
                .into_iter()
                .map(|ns| ns.into_iter().map(|n| n.id).collect())
                .collect();
            distance_evals += index.distance_evaluations();
            let (output, cache) = block.forward(&pooled, &positions, &neighbors, record);
            levels.push(EncoderLevel {
                positions,
                pooling,
                attention: cache,
                output,
            });
        }

        Ok(Encoding {
            scale_id: self.scale_id,
            embed_cache: record.then(|| EmbedCache { input, e0, h0, e1 }),
            levels,
            distance_evals,
        })
    }

    /// Fusion step for this scale. `None` when the model has no fusion block.
    pub fn fuse(
        &self,
        store: &FusedFeatureStore,
        current: &FeatureMatrix,
        record: bool,
    ) -> Result<Option<crate::fusion::FusionOutput>> {
        match &self.net.fusion {
            Some(weights) => fuse(
                store,
                current,
                weights,
                &self.fusion_config,
                self.config.search,
                record,
            )
            .map(Some),
            None => Ok(None),
        }
    }

    /// Decoder from the (optionally fused) last-stage features to per-point logits.
    pub fn decode(&self, encoding: &Encoding, top: &FeatureMatrix, record: bool) -> Result<Decoding> {
        if top.is_empty() {
            return Err(Error::Empty("no features to decode".into()));
        }
        if top.scale_id != encoding.scale_id || top.scale_id != self.scale_id {
            return Err(Error::Shape(format!(
                "features of scale {} decoded by scale {}",
                top.scale_id, self.scale_id
            )));
        }
        let last = encoding.levels.last().ok_or_else(|| Error::Invariant("no encoder levels".into()))?;
        if top.positions != last.positions || top.features.cols() != self.config.feature_dim {
            return Err(Error::Shape(
                "decoder input does not match the encoder's last stage".into(),
            ));
        }

        let mut distance_evals = 0;
        let mut current = top.features.clone();
        let mut steps = Vec::with_capacity(encoding.levels.len().saturating_sub(1));
        for l in (0..encoding.levels.len() - 1).rev() {
            let (coarse, fine) = (&encoding.levels[l + 1], &encoding.levels[l]);
            let (interp, evals) = Interpolation::plan(
                &coarse.positions,
                &fine.positions,
                self.config.interp_neighbors,
                self.config.search,
            )?;
            distance_evals += evals;
            let up_input = interp.forward(&current).hcat(&fine.output);
            let pre = self.net.up[l].forward(&up_input);
            current = relu(&pre);
            steps.push(DecoderStep {
                level: l,
                interp,
                up_input: record.then_some(up_input),
                pre: record.then_some(pre),
            });
        }
        let hidden_pre = self.net.head_hidden.forward(&current);
        let hidden = relu(&hidden_pre);
        let logits = self.net.classifier.forward(&hidden);
        Ok(Decoding {
            prediction: Prediction::from_logits(logits),
            cache: record.then_some(DecoderCache {
                steps,
                head_input: current,
                hidden_pre,
                hidden,
            }),
            distance_evals,
        })
    }

    /// Full per-scale pass: encode, fuse against `store` (when given and the
    /// model has a fusion block), decode.
    pub fn forward(
        &self,
        part: &PointCloud,
        store: Option<&FusedFeatureStore>,
        record: bool,
    ) -> Result<ScaleForward> {
        let encoding = self.encode(part, record)?;
        let alpha = encoding.features();
        let fusion = match store {
            Some(s) if !s.is_empty() => self.fuse(s, &alpha, record)?,
            _ => None,
        };
        let top = fusion.as_ref().map_or(&alpha, |f| &f.fused);
        let decoding = self.decode(&encoding, top, record)?;
        let fused = fusion.as_ref().map(|f| f.fused.clone());
        Ok(ScaleForward {
            encoding,
            fusion_cache: fusion.as_ref().and_then(|f| f.cache.clone()),
            fusion_evals: fusion.as_ref().map_or(0, |f| f.distance_evals),
            store: if fusion.is_some() && record { store.cloned() } else { None },
            fused,
            decoding,
            recorded: record,
        })
    }

    /// Exact parameter gradients for a recorded forward pass, given `dL/dlogits`.
    ///
    /// Returns `Ok(None)` for frozen models.
    pub fn backward(&self, fwd: &ScaleForward, d_logits: &Matrix) -> Result<Option<Network>> {
        if self.frozen {
            return Ok(None);
        }
        if !fwd.recorded {
            return Err(Error::NoForwardRecorded);
        }
        let dec = fwd.decoding.cache.as_ref().ok_or(Error::NoForwardRecorded)?;
        let emb = fwd.encoding.embed_cache.as_ref().ok_or(Error::NoForwardRecorded)?;
        if d_logits.rows() != fwd.decoding.prediction.logits.rows()
            || d_logits.cols() != self.config.num_classes
        {
            return Err(Error::Shape("loss gradient shape".into()));
        }
        let mut grad = self.net.zeros_like();
        let levels = &fwd.encoding.levels;
        let dim = self.config.feature_dim;

        // Head.
        let d_hidden = self.net.classifier.backward(&dec.hidden, d_logits, &mut grad.classifier);
        let d_hidden_pre = relu_backward(&dec.hidden_pre, &d_hidden);
        let mut d_current = self
            .net
            .head_hidden
            .backward(&dec.head_input, &d_hidden_pre, &mut grad.head_hidden);

        // Decoder, finest level first (reverse of the forward order).
        let mut d_level_out: Vec<Matrix> = levels
            .iter()
            .map(|l| Matrix::zeros(l.output.rows(), dim))
            .collect();
        for step in dec.steps.iter().rev() {
            let pre = step.pre.as_ref().ok_or(Error::NoForwardRecorded)?;
            let up_input = step.up_input.as_ref().ok_or(Error::NoForwardRecorded)?;
            let d_pre = relu_backward(pre, &d_current);
            let d_up = self.net.up[step.level].backward(up_input, &d_pre, &mut grad.up[step.level]);
            let (d_interp, d_skip) = d_up.hsplit(dim);
            d_level_out[step.level].add_assign(&d_skip);
            d_current = step.interp.backward(&d_interp);
        }

        // Top of the encoder, through fusion when it ran.
        let d_alpha = match (&fwd.fusion_cache, &self.net.fusion, &fwd.store) {
            (Some(cache), Some(weights), Some(store)) => {
                let gw = grad
                    .fusion
                    .as_mut()
                    .ok_or_else(|| Error::Invariant("fusion gradient slot".into()))?;
                fuse_backward(weights, cache, store, &d_current, gw)
            }
            (None, _, None) => d_current,
            _ => return Err(Error::NoForwardRecorded),
        };
        let top = levels.len() - 1;
        d_level_out[top].add_assign(&d_alpha);

        // Encoder stages, last to first.
        let mut d_embedded = None;
        for s in (0..levels.len()).rev() {
            let cache = levels[s].attention.as_ref().ok_or(Error::NoForwardRecorded)?;
            let d_in = self.net.stages[s].backward(cache, &d_level_out[s], &mut grad.stages[s]);
            let d_prev = match &levels[s].pooling {
                Some(pool) => pool.backward(&d_in),
                None => d_in,
            };
            if s == 0 {
                d_embedded = Some(d_prev);
            } else {
                d_level_out[s - 1].add_assign(&d_prev);
            }
        }
        let d_embedded = d_embedded.ok_or_else(|| Error::Invariant("no encoder stages".into()))?;
        let d_e1 = relu_backward(&emb.e1, &d_embedded);
        let d_h0 = self.net.embed[1].backward(&emb.h0, &d_e1, &mut grad.embed[1]);
        let d_e0 = relu_backward(&emb.e0, &d_h0);
        self.net.embed[0].backward(&emb.input, &d_e0, &mut grad.embed[0]);
        Ok(Some(grad))
    }
}

#[derive(Debug, Clone)]
struct EmbedCache {
    input: Matrix,
    e0: Matrix,
    h0: Matrix,
    e1: Matrix,
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub positions: Vec<[f64; 3]>,
    pooling: Option<Pooling>,
    attention: Option<AttentionCache>,
    pub output: Matrix,
}

impl EncoderLevel {
    pub fn attention_cache(&self) -> Option<&AttentionCache> {
        self.attention.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct Encoding {
    pub scale_id: usize,
    embed_cache: Option<EmbedCache>,
    pub levels: Vec<EncoderLevel>,
    pub distance_evals: u64,
}

impl Encoding {
    /// Last-stage features, the scale's `alpha`.
    pub fn features(&self) -> FeatureMatrix {
        let last = self.levels.last().expect("encoder has at least one stage");
        FeatureMatrix {
            positions: last.positions.clone(),
            features: last.output.clone(),
            scale_id: self.scale_id,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderStep {
    level: usize,
    interp: Interpolation,
    up_input: Option<Matrix>,
    pre: Option<Matrix>,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    steps: Vec<DecoderStep>,
    head_input: Matrix,
    hidden_pre: Matrix,
    hidden: Matrix,
}

#[derive(Debug, Clone)]
pub struct Decoding {
    pub prediction: Prediction,
    cache: Option<DecoderCache>,
    pub distance_evals: u64,
}

/// Everything a full per-scale forward produced, including what backward needs.
#[derive(Debug, Clone)]
pub struct ScaleForward {
    pub encoding: Encoding,
    /// Fused features `alpha^f` when fusion ran.
    pub fused: Option<FeatureMatrix>,
    fusion_cache: Option<FusionCache>,
    pub fusion_evals: u64,
    store: Option<FusedFeatureStore>,
    pub decoding: Decoding,
    recorded: bool,
}

impl ScaleForward {
    pub fn prediction(&self) -> &Prediction {
        &self.decoding.prediction
    }

    /// Features this scale contributes to the store of later scales.
    pub fn store_contribution(&self) -> FeatureMatrix {
        self.fused.clone().unwrap_or_else(|| self.encoding.features())
    }

    pub fn distance_evals(&self) -> u64 {
        self.encoding.distance_evals + self.fusion_evals + self.decoding.distance_evals
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cloud(n: usize, seed: u64, classes: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..0.5)])
            .collect();
        let col = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let lab = (0..n).map(|_| rng.random_range(0..classes) as u16).collect();
        PointCloud::new(pos, col, Some(lab), classes).unwrap()
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            feature_dim: 4,
            attention_neighbors: 4,
            encoder_stages: 2,
            downsample_factor: 2.0,
            num_classes: 3,
            interp_neighbors: 3,
            search: SearchStrategy::KdTree,
        }
    }

    #[test]
    fn single_point_partition() {
        let m = ScaleModel::new(1, 0.1, BackboneConfig { num_classes: 3, ..Default::default() }, 8, false, 1)
            .unwrap();
        let fwd = m.forward(&cloud(1, 1, 3), None, true).unwrap();
        let alpha = fwd.encoding.features();
        assert_eq!(alpha.len(), 1);
        let w = fwd.encoding.levels[0].attention_cache().unwrap().weights_of(0);
        assert_eq!(w.len(), 1);
        assert!(w[0].iter().all(|&v| v == 1.0));
        assert_eq!(fwd.prediction().labels.len(), 1);
    }

    #[test]
    fn shapes_on_a_few_hundred_points() {
        let m = ScaleModel::new(1, 0.05, BackboneConfig { num_classes: 3, ..Default::default() }, 8, false, 2)
            .unwrap();
        let part = cloud(500, 2, 3);
        let fwd = m.forward(&part, None, false).unwrap();
        let alpha = fwd.encoding.features();
        assert!(alpha.len() <= 500);
        assert_eq!(alpha.features.cols(), 32);
        assert_eq!(fwd.prediction().logits.rows(), 500);
        assert_eq!(fwd.prediction().logits.cols(), 3);
    }

    #[test]
    fn frozen_model_has_no_gradients() {
        let mut m = ScaleModel::new(1, 0.2, small_cfg(), 4, false, 3).unwrap();
        let part = cloud(12, 3, 3);
        let fwd = m.forward(&part, None, true).unwrap();
        m.freeze();
        let d = Matrix::zeros(12, 3);
        assert!(m.backward(&fwd, &d).unwrap().is_none());
        assert!(matches!(m.apply_update(&vec![0.0; m.net.num_params()]), Err(Error::Frozen(1))));
    }

    #[test]
    fn backward_without_recording_is_rejected() {
        let m = ScaleModel::new(1, 0.2, small_cfg(), 4, false, 4).unwrap();
        let part = cloud(12, 4, 3);
        let fwd = m.forward(&part, None, false).unwrap();
        assert!(matches!(
            m.backward(&fwd, &Matrix::zeros(12, 3)),
            Err(Error::NoForwardRecorded)
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let m = ScaleModel::new(1, 0.2, small_cfg(), 4, false, 5).unwrap();
        let part = cloud(15, 5, 3);
        let fwd = m.forward(&part, None, true).unwrap();
        let g = m.backward(&fwd, &Matrix::zeros(15, 3)).unwrap().unwrap();
        assert!(g.flat_params().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_params_roundtrip() {
        let mut m = ScaleModel::new(2, 0.2, small_cfg(), 4, true, 6).unwrap();
        let mut flat = m.net.flat_params();
        flat[3] += 1.0;
        m.net.set_flat_params(&flat).unwrap();
        assert_eq!(m.net.flat_params(), flat);
        assert!(m.net.set_flat_params(&flat[1..]).is_err());
    }

    #[test]
    fn decode_rejects_foreign_features() {
        let m = ScaleModel::new(2, 0.2, small_cfg(), 4, false, 7).unwrap();
        let enc = m.encode(&cloud(10, 7, 3), false).unwrap();
        let mut alpha = enc.features();
        alpha.scale_id = 3;
        assert!(matches!(m.decode(&enc, &alpha, false), Err(Error::Shape(_))));
        let empty = FeatureMatrix {
            positions: vec![],
            features: Matrix::zeros(0, 4),
            scale_id: 2,
        };
        assert!(matches!(m.decode(&enc, &empty, false), Err(Error::Empty(_))));
    }

    #[test]
    fn untrained_fusion_matches_model_without_it() {
        let plain = ScaleModel::new(2, 0.2, small_cfg(), 3, false, 8).unwrap();
        let fused = ScaleModel::new(2, 0.2, small_cfg(), 3, true, 8).unwrap();
        let mut shared = Vec::new();
        plain.net.for_each_linear(|name, l| shared.push((name, l.clone())));
        let mut seen = 0;
        fused.net.for_each_linear(|name, l| {
            if let Some((_, want)) = shared.iter().find(|(n, _)| *n == name) {
                assert_eq!(l, want, "{name}");
                seen += 1;
            }
        });
        assert_eq!(seen, shared.len());

        let part = cloud(30, 8, 3);
        let mut store = FusedFeatureStore::new(4);
        let lower = cloud(10, 9, 3);
        store
            .push(&FeatureMatrix {
                positions: lower.positions().to_vec(),
                features: Matrix::from_rows(&vec![[5.0, -3.0, 2.0, 7.0]; 10]),
                scale_id: 1,
            })
            .unwrap();
        let a = plain.forward(&part, None, false).unwrap();
        let b = fused.forward(&part, Some(&store), false).unwrap();
        assert_eq!(a.prediction().logits, b.prediction().logits);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
