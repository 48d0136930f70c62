//! The fingerprint network. A constrained convolution feeds a stride-1
//! residual encoder whose 1x1 head emits a Gaussian code; a
//! logistic-regression decoder maps codes to camera models.
//!
//! All learnable values live in one flat `Vec<f64>`; [`Architecture`] maps
//! named slots onto it. Gradients share the same layout, which keeps the
//! optimizer and checkpoint code trivial.

mod checkpoint;
mod code;
mod config;
mod constrained;
pub(crate) mod conv;
mod norm;

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use code::{sample_code, softmax, StochasticCode};
pub(crate) use code::scale_from_pre;
pub use config::{ConstrainedConvSpec, EncoderConfig, ModelConfig, ScaleParam, MIN_SCALE};
pub use constrained::{constrained_conv_forward, constraint_penalty, filter_sums, project_zero_sum};
pub(crate) use constrained::constraint_penalty_grad;
pub use norm::NormStats;
pub(crate) use norm::BatchMoments;

use crate::error::{Error, Result};

/// An `H x W x C` patch of intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    pub pixels: Array3<f64>,
}

impl ImagePatch {
    pub fn new(pixels: Array3<f64>) -> Self {
        Self { pixels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    ConstrainedKernel,
    Kernel,
    Bias,
    NormScale,
    NormShift,
}

impl SlotKind {
    /// Slots that count as network weights for the L1/L2 penalties.
    pub fn is_weight(self) -> bool {
        matches!(self, SlotKind::ConstrainedKernel | SlotKind::Kernel)
    }
}

/// A named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub kind: SlotKind,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    pad: usize,
    relu: bool,
}

#[derive(Clone, Debug)]
enum Stage {
    Plain(ConvUnit),
    /// ResNet-v1 basic block: `relu(bn(conv(relu(bn(conv(x))))) + x)`.
    Residual(ConvUnit, ConvUnit),
}

/// Layer plan and parameter layout derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub slots: Vec<Slot>,
    stages: Vec<Stage>,
    norm_channels: Vec<usize>,
    head_w: usize,
    head_b: usize,
    dec_w: usize,
    dec_b: usize,
    total: usize,
}

struct LayoutBuilder {
    slots: Vec<Slot>,
    norm_channels: Vec<usize>,
    total: usize,
}

impl LayoutBuilder {
    fn slot(&mut self, name: String, shape: Vec<usize>, kind: SlotKind) -> usize {
        let slot = Slot {
            name,
            offset: self.total,
            shape,
            kind,
        };
        self.total += slot.len();
        self.slots.push(slot);
        self.slots.len() - 1
    }

    fn unit(&mut self, name: &str, kernel: usize, pad: usize, cin: usize, cout: usize, relu: bool, kind: SlotKind) -> ConvUnit {
        let weight = self.slot(format!("{name}.weight"), vec![kernel, kernel, cin, cout], kind);
        let gamma = self.slot(format!("{name}.bn.scale"), vec![cout], SlotKind::NormScale);
        let beta = self.slot(format!("{name}.bn.shift"), vec![cout], SlotKind::NormShift);
        self.norm_channels.push(cout);
        ConvUnit {
            weight,
            gamma,
            beta,
            norm: self.norm_channels.len() - 1,
            pad,
            relu,
        }
    }

    fn residual(&mut self, name: &str, ch: usize) -> Stage {
        let a = self.unit(&format!("{name}.a"), 3, 1, ch, ch, true, SlotKind::Kernel);
        let b = self.unit(&format!("{name}.b"), 3, 1, ch, ch, false, SlotKind::Kernel);
        Stage::Residual(a, b)
    }
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        let cc = &config.constrained;
        let ch = e.channels;
        let mut b = LayoutBuilder {
            slots: Vec::new(),
            norm_channels: Vec::new(),
            total: 0,
        };
        let mut stages = vec![Stage::Plain(b.unit(
            "constrained",
            cc.support,
            0,
            cc.in_channels,
            cc.num_filters,
            true,
            SlotKind::ConstrainedKernel,
        ))];
        let mut cin = cc.num_filters;
        for g in 0..e.num_residual_groups {
            let [k0, k1] = e.group_kernels;
            stages.push(Stage::Plain(b.unit(&format!("group{g}.conv0"), k0, 0, cin, ch, true, SlotKind::Kernel)));
            stages.push(b.residual(&format!("group{g}.res0"), ch));
            stages.push(Stage::Plain(b.unit(&format!("group{g}.conv1"), k1, 0, ch, ch, true, SlotKind::Kernel)));
            stages.push(b.residual(&format!("group{g}.res1"), ch));
            cin = ch;
        }
        let last = config.final_kernel()?;
        stages.push(Stage::Plain(b.unit("final", last, 0, cin, ch, true, SlotKind::Kernel)));
        let head_w = b.slot("head.weight".into(), vec![ch, 2 * e.code_dim], SlotKind::Kernel);
        let head_b = b.slot("head.bias".into(), vec![2 * e.code_dim], SlotKind::Bias);
        let dec_w = b.slot("decoder.weight".into(), vec![e.code_dim, config.num_classes], SlotKind::Kernel);
        let dec_b = b.slot("decoder.bias".into(), vec![config.num_classes], SlotKind::Bias);
        Ok(Self {
            slots: b.slots,
            stages,
            norm_channels: b.norm_channels,
            head_w,
            head_b,
            dec_w,
            dec_b,
            total: b.total,
        })
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn num_norms(&self) -> usize {
        self.norm_channels.len()
    }

    pub fn constrained_slot(&self) -> &Slot {
        &self.slots[0]
    }

    pub fn slot(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; caches kept for backprop.
    Train,
    /// Frozen running statistics; deterministic per patch.
    Eval,
}

struct UnitCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize, usize),
    norm: Option<norm::NormCache>,
    out: Array4<f64>,
}

enum StageCache {
    Plain(UnitCache),
    Residual(UnitCache, UnitCache, Array4<f64>),
}

/// Intermediate values of a training forward pass.
pub(crate) struct Tape {
    stages: Vec<StageCache>,
    feature: Array2<f64>,
}

/// Output of a batched forward pass through the encoder.
pub(crate) struct EncoderOutput {
    /// `[N, 2d]` head activations (mean half, then pre-scale half).
    pub head: Array2<f64>,
    pub tape: Option<Tape>,
    pub moments: Vec<BatchMoments>,
}

/// Parameters plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct FingerprintModel {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub weights: Vec<f64>,
    pub norms: Vec<NormStats>,
}

impl FingerprintModel {
    /// He-normal kernels, unit/zero normalization affine, zero biases; the
    /// constrained bank starts projected onto the zero-sum set.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut weights = vec![0.0; arch.num_params()];
        for slot in &arch.slots {
            let range = slot.range();
            match slot.kind {
                SlotKind::ConstrainedKernel | SlotKind::Kernel => {
                    let fan_in: usize = slot.shape[..slot.shape.len() - 1].iter().product();
                    let gain = if slot.name.starts_with("head") || slot.name.starts_with("decoder") {
                        1.0
                    } else {
                        2.0
                    };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    for w in &mut weights[range] {
                        *w = normal.sample(rng);
                    }
                }
                SlotKind::NormScale => weights[range].fill(1.0),
                SlotKind::Bias | SlotKind::NormShift => {}
            }
        }
        let norms = arch.norm_channels.iter().map(|&c| NormStats::new(c)).collect();
        let mut model = Self {
            config,
            arch,
            weights,
            norms,
        };
        project_zero_sum(model.constrained_weights_mut());
        Ok(model)
    }

    pub fn from_parts(config: ModelConfig, weights: Vec<f64>, norms: Vec<NormStats>) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        if weights.len() != arch.num_params() {
            return Err(Error::Shape(format!(
                "{} weights for an architecture with {} parameters",
                weights.len(),
                arch.num_params()
            )));
        }
        if norms.len() != arch.num_norms()
            || norms
                .iter()
                .zip(&arch.norm_channels)
                .any(|(n, &c)| n.mean.len() != c || n.var.len() != c)
        {
            return Err(Error::Shape("normalization statistics do not match architecture".into()));
        }
        Ok(Self {
            config,
            arch,
            weights,
            norms,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.config.encoder.code_dim
    }

    pub fn patch_size(&self) -> usize {
        self.config.encoder.patch_size
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn view4(&self, slot: usize) -> ArrayView4<'_, f64> {
        let s = &self.arch.slots[slot];
        ArrayView4::from_shape((s.shape[0], s.shape[1], s.shape[2], s.shape[3]), &self.weights[s.range()])
            .expect("slot shape")
    }

    fn view2(&self, slot: usize) -> ArrayView2<'_, f64> {
        let s = &self.arch.slots[slot];
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &self.weights[s.range()]).expect("slot shape")
    }

    fn view1(&self, slot: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.weights[self.arch.slots[slot].range()])
    }

    /// The `[S, S, in_channels, k]` constrained filter bank.
    pub fn constrained_weights(&self) -> ArrayView4<'_, f64> {
        self.view4(0)
    }

    pub fn constrained_weights_mut(&mut self) -> ArrayViewMut4<'_, f64> {
        let s = &self.arch.slots[0];
        let shape = (s.shape[0], s.shape[1], s.shape[2], s.shape[3]);
        ArrayViewMut4::from_shape(shape, &mut self.weights[s.range()]).expect("slot shape")
    }

    /// Decoder kernel `[d, M]` and bias `[M]`.
    pub fn decoder(&self) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        (self.view2(self.arch.dec_w), self.view1(self.arch.dec_b))
    }

    fn check_batch(&self, patches: &ArrayView4<f64>) -> Result<()> {
        let p = self.patch_size();
        let c = self.config.constrained.in_channels;
        let (n, h, w, ch) = patches.dim();
        if n == 0 {
            return Err(Error::Empty("patch batch".into()));
        }
        if h != p || w != p || ch != c {
            return Err(Error::Shape(format!(
                "patch is {h}x{w}x{ch}, model expects {p}x{p}x{c}"
            )));
        }
        Ok(())
    }

    fn unit_forward(&self, unit: &ConvUnit, input: ArrayView4<f64>, mode: Mode, moments: &mut Vec<BatchMoments>) -> UnitCache {
        let in_shape = input.dim();
        let (out, cols) = conv::forward(input, self.view4(unit.weight), unit.pad);
        let (n, h, w, c) = out.dim();
        let flat = out.into_shape_with_order((n * h * w, c)).expect("contiguous");
        let gamma = self.view1(unit.gamma);
        let beta = self.view1(unit.beta);
        let (mut y, cache) = match mode {
            Mode::Train => {
                let (y, cache, m) = norm::forward_train(flat.view(), gamma, beta);
                moments.push(m);
                (y, Some(cache))
            }
            Mode::Eval => (norm::forward_eval(flat.view(), gamma, beta, &self.norms[unit.norm]), None),
        };
        if unit.relu {
            y.mapv_inplace(|v| v.max(0.0));
        }
        let out = y.into_shape_with_order((n, h, w, c)).expect("contiguous");
        UnitCache {
            cols: if mode == Mode::Train { cols } else { Array2::zeros((0, 0)) },
            in_shape,
            norm: cache,
            out,
        }
    }

    /// Backprop through one conv-norm(-relu) unit; accumulates parameter
    /// gradients into `grad` and returns the input gradient if requested.
    fn unit_backward(&self, unit: &ConvUnit, cache: &UnitCache, d_out: Array4<f64>, grad: &mut [f64], need_input: bool) -> Option<Array4<f64>> {
        let mut d = d_out;
        if unit.relu {
            ndarray::Zip::from(&mut d).and(&cache.out).for_each(|g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
        }
        let (n, h, w, c) = d.dim();
        let flat = d.into_shape_with_order((n * h * w, c)).expect("contiguous");
        let norm_cache = cache.norm.as_ref().expect("backward requires a training pass");
        let (dx, dg, db) = norm::backward(flat.view(), norm_cache, self.view1(unit.gamma));
        add_into(grad, &self.arch.slots[unit.gamma], dg.iter());
        add_into(grad, &self.arch.slots[unit.beta], db.iter());
        let dx = dx.into_shape_with_order((n, h, w, c)).expect("contiguous");
        let (d_in, dw) = conv::backward(dx.view(), &cache.cols, self.view4(unit.weight), cache.in_shape, unit.pad, need_input);
        add_into(grad, &self.arch.slots[unit.weight], dw.iter());
        d_in
    }

    /// Batched encoder pass over `[N, P, P, C]` patches.
    pub(crate) fn encoder_forward(&self, patches: ArrayView4<f64>, mode: Mode) -> Result<EncoderOutput> {
        self.check_batch(&patches)?;
        let mut moments = Vec::new();
        let mut caches = Vec::with_capacity(self.arch.stages.len());
        let mut x: Option<Array4<f64>> = None;
        for stage in &self.arch.stages {
            let input = match &x {
                Some(a) => a.view(),
                None => patches.view(),
            };
            match stage {
                Stage::Plain(u) => {
                    let c = self.unit_forward(u, input, mode, &mut moments);
                    x = Some(c.out.clone());
                    caches.push(StageCache::Plain(c));
                }
                Stage::Residual(ua, ub) => {
                    let ca = self.unit_forward(ua, input, mode, &mut moments);
                    let cb = self.unit_forward(ub, ca.out.view(), mode, &mut moments);
                    let mut sum = &cb.out + &input;
                    sum.mapv_inplace(|v| v.max(0.0));
                    x = Some(sum.clone());
                    caches.push(StageCache::Residual(ca, cb, sum));
                }
            }
        }
        let body = x.expect("at least one stage");
        let (n, h, w, c) = body.dim();
        debug_assert_eq!((h, w), (1, 1));
        let feature = body.into_shape_with_order((n, c)).expect("1x1 body output");
        let head = feature.dot(&self.view2(self.arch.head_w)) + self.view1(self.arch.head_b);
        let tape = (mode == Mode::Train).then_some(Tape { stages: caches, feature });
        Ok(EncoderOutput { head, tape, moments })
    }

    /// Backprop from head gradient `[N, 2d]` to all encoder parameters.
    pub(crate) fn encoder_backward(&self, tape: &Tape, d_head: &Array2<f64>, grad: &mut [f64]) {
        let d_hw = tape.feature.t().dot(d_head);
        add_into(grad, &self.arch.slots[self.arch.head_w], d_hw.iter());
        add_into(grad, &self.arch.slots[self.arch.head_b], d_head.sum_axis(Axis(0)).iter());
        let d_feat = d_head.dot(&self.view2(self.arch.head_w).t());
        let (n, c) = d_feat.dim();
        let mut d = d_feat.into_shape_with_order((n, 1, 1, c)).expect("1x1");
        for (i, (stage, cache)) in self.arch.stages.iter().zip(&tape.stages).enumerate().rev() {
            let need_input = i > 0;
            match (stage, cache) {
                (Stage::Plain(u), StageCache::Plain(c)) => {
                    match self.unit_backward(u, c, d, grad, need_input) {
                        Some(g) => d = g,
                        None => break,
                    }
                }
                (Stage::Residual(ua, ub), StageCache::Residual(ca, cb, sum)) => {
                    ndarray::Zip::from(&mut d).and(sum).for_each(|g, &o| {
                        if o <= 0.0 {
                            *g = 0.0;
                        }
                    });
                    let d_a = self.unit_backward(ub, cb, d.clone(), grad, true).expect("input grad");
                    let d_x = self.unit_backward(ua, ca, d_a, grad, true).expect("input grad");
                    d = d + d_x;
                }
                _ => unreachable!("tape matches architecture"),
            }
        }
    }

    /// Splits head activations into per-patch codes.
    pub(crate) fn codes_from_head(&self, head: &Array2<f64>) -> Vec<StochasticCode> {
        let d = self.code_dim();
        let param = self.config.encoder.scale;
        head.rows()
            .into_iter()
            .map(|row| StochasticCode {
                mean: row.iter().take(d).copied().collect(),
                scale: row.iter().skip(d).map(|&p| scale_from_pre(p, param).0).collect(),
            })
            .collect()
    }

    /// Deterministic (evaluation-mode) code for a single patch.
    pub fn encode(&self, patch: &ImagePatch) -> Result<StochasticCode> {
        let batch = patch.pixels.view().insert_axis(Axis(0));
        let out = self.encoder_forward(batch, Mode::Eval)?;
        Ok(self.codes_from_head(&out.head).remove(0))
    }

    /// Evaluation-mode codes for a `[N, P, P, C]` batch.
    pub fn encode_batch(&self, patches: ArrayView4<f64>) -> Result<Vec<StochasticCode>> {
        let out = self.encoder_forward(patches, Mode::Eval)?;
        Ok(self.codes_from_head(&out.head))
    }

    /// Decoder logits for a code sample.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let d = self.code_dim();
        if z.len() != d {
            return Err(Error::Shape(format!("z has {} entries, code dim is {d}", z.len())));
        }
        let (w, b) = self.decoder();
        Ok((0..self.num_classes())
            .map(|m| b[m] + z.iter().enumerate().map(|(i, zi)| zi * w[[i, m]]).sum::<f64>())
            .collect())
    }

    /// Class probabilities `softmax(z W + b)` over camera models.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(z)?))
    }

    /// Folds the batch statistics of a training pass into the running statistics.
    pub(crate) fn update_norms(&mut self, moments: &[BatchMoments]) {
        for (stats, m) in self.norms.iter_mut().zip(moments) {
            stats.update(m);
        }
    }

    pub(crate) fn slot_index(&self, which: HeadSlot) -> usize {
        match which {
            HeadSlot::DecoderWeight => self.arch.dec_w,
            HeadSlot::DecoderBias => self.arch.dec_b,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum HeadSlot {
    DecoderWeight,
    DecoderBias,
}

fn add_into<'a>(grad: &mut [f64], slot: &Slot, values: impl Iterator<Item = &'a f64>) {
    for (g, v) in grad[slot.range()].iter_mut().zip(values) {
        *g += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(cfg: ModelConfig) -> FingerprintModel {
        FingerprintModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn patch(size: usize, seed: u64) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::new(Array3::from_shape_fn((size, size, 3), |_| rng.random::<f64>()))
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = Architecture::new(&ModelConfig::default()).unwrap();
        let b = Architecture::new(&ModelConfig::default()).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert_eq!(a.slots, b.slots);
        // constrained 3*3*3*16 + bn 32; group: 7*7*16*16, 2 res (4 convs 3*3*16*16), 5*5*16*16,
        // each with bn 32; final 5*5*16*16 + bn; head 16*16 + 16; decoder 8*4 + 4.
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + 2 * o;
        let expected = conv(3, 3, 16)
            + conv(7, 16, 16)
            + 4 * conv(3, 16, 16)
            + conv(5, 16, 16)
            + conv(5, 16, 16)
            + 16 * 16
            + 16
            + 8 * 4
            + 4;
        assert_eq!(a.num_params(), expected);
    }

    #[test]
    fn encode_is_deterministic_with_expected_shape() {
        let m = model(ModelConfig::default());
        let p = patch(17, 1);
        let a = m.encode(&p).unwrap();
        let b = m.encode(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean.len(), 8);
        assert_eq!(a.scale.len(), 8);
        assert!(a.scale.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn zero_head_gives_ln2_scale() {
        let mut m = model(ModelConfig::tiny());
        let s = m.arch.slot("head.weight").unwrap().range();
        m.weights[s].fill(0.0);
        let code = m.encode(&patch(9, 2)).unwrap();
        for s in &code.scale {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-15);
        }
        assert!(code.mean.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_size_is_shape_error() {
        let m = model(ModelConfig::tiny());
        assert!(matches!(m.encode(&patch(11, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_encode_matches_single_in_eval_mode() {
        let m = model(ModelConfig::tiny());
        let p1 = patch(9, 5);
        let p2 = patch(9, 6);
        let batch = ndarray::stack(Axis(0), &[p1.pixels.view(), p2.pixels.view()]).unwrap();
        let codes = m.encode_batch(batch.view()).unwrap();
        let single = m.encode(&p2).unwrap();
        for (a, b) in codes[1].mean.iter().zip(&single.mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let mut m = model(ModelConfig::tiny());
        let (w, b) = (m.slot_index(HeadSlot::DecoderWeight), m.slot_index(HeadSlot::DecoderBias));
        for s in [w, b] {
            let r = m.arch.slots[s].range();
            m.weights[r].fill(0.0);
        }
        let p = m.decode(&[0.3, -1.0, 2.0, 0.1]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let m = model(ModelConfig::tiny());
        let p = m.decode(&[5.0, -3.0, 0.2, 1.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!(m.decode(&[1.0]).is_err());
    }

    #[test]
    fn init_bank_is_zero_sum() {
        let m = model(ModelConfig::default());
        assert!(constraint_penalty(m.constrained_weights()) < 1e-12);
    }
}
