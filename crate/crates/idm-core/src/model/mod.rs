//! Encoder-decoder segmentation network with a feature head and classifier
//! head, explicit reverse pass, EMA teacher, and checkpoint IO.
//!
//! Topology (spatial dims must be divisible by 4):
//!
//! ```text
//! in ─ conv3 ─ silu ─ conv3 ─ silu ──────────────────────────┐ (skip A)
//!                      │ pool2                                │
//!                      conv3 ─ silu ───────────┐ (skip B)     │
//!                      │ pool2                  │              │
//!                      conv3 ─ silu             │              │
//!                      │ up2                    │              │
//!                      conv3 ─(+B)─ silu        │              │
//!                      │ up2                                   │
//!                      conv3 ─(+A)─ silu
//!                      conv3 ─ silu  → features (D planes)
//!                      conv1        → logits   (C planes)
//! ```

pub mod checkpoint;
pub mod layers;

use crate::error::{IdmError, Result};
use crate::scalar::{s, up, Scalar};
use crate::tensor::{Image, LabelMap, Tensor3};
use layers::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seeds::{self, stream};

/// Network shape descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub widths: [usize; 3],
    pub feat_dim: usize,
    pub num_classes: usize,
}

impl Arch {
    pub fn new(num_classes: usize) -> Self {
        Arch {
            in_channels: 3,
            widths: [16, 32, 64],
            feat_dim: 32,
            num_classes,
        }
    }

    /// Slimmer profile sized for CPU-minute training runs.
    pub fn desk(num_classes: usize) -> Self {
        Arch {
            in_channels: 3,
            widths: [12, 24, 48],
            feat_dim: 24,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(IdmError::Config("num_classes must be >= 2".into()));
        }
        if self.in_channels == 0 || self.feat_dim == 0 || self.widths.iter().any(|&w| w == 0) {
            return Err(IdmError::Config("arch dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

/// One named parameter array.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub group: ParamGroup,
    pub is_bias: bool,
}

/// The student network: an arch descriptor plus named parameter arrays.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub arch: Arch,
    pub params: Vec<Param<T>>,
}

/// Layer metadata in parameter order.
struct ConvDef {
    name: &'static str,
    kernel: usize,
    group: ParamGroup,
}

const CONV_DEFS: [ConvDef; 8] = [
    ConvDef { name: "enc_in", kernel: 3, group: ParamGroup::Encoder },
    ConvDef { name: "enc_mid", kernel: 3, group: ParamGroup::Encoder },
    ConvDef { name: "enc_down", kernel: 3, group: ParamGroup::Encoder },
    ConvDef { name: "bottleneck", kernel: 3, group: ParamGroup::Encoder },
    ConvDef { name: "dec_up1", kernel: 3, group: ParamGroup::Decoder },
    ConvDef { name: "dec_up2", kernel: 3, group: ParamGroup::Decoder },
    ConvDef { name: "feat_head", kernel: 3, group: ParamGroup::Decoder },
    ConvDef { name: "classifier", kernel: 1, group: ParamGroup::Decoder },
];

fn conv_channels(arch: &Arch) -> [(usize, usize); 8] {
    let [w1, w2, w3] = arch.widths;
    [
        (arch.in_channels, w1),
        (w1, w1),
        (w1, w2),
        (w2, w3),
        (w3, w2),
        (w2, w1),
        (w1, arch.feat_dim),
        (arch.feat_dim, arch.num_classes),
    ]
}

impl<T: Scalar> ModelState<T> {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        ModelState {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| U::from(v).unwrap()).collect(),
                    group: p.group,
                    is_bias: p.is_bias,
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.params[2 * layer].data
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.params[2 * layer + 1].data
    }
}

/// He-normal initialization, deterministic in the seed.
pub fn init_model<T: Scalar>(arch: &Arch, seed: u64) -> ModelState<T> {
    arch.validate().expect("valid arch");
    let channels = conv_channels(arch);
    let mut params = Vec::with_capacity(16);
    for (layer, def) in CONV_DEFS.iter().enumerate() {
        let (ic, oc) = channels[layer];
        let k = def.kernel;
        let fan_in = (ic * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, stream::INIT, layer as u64));
        let weight: Vec<T> = (0..oc * ic * k * k)
            .map(|_| s(normal.sample(&mut rng)))
            .collect();
        params.push(Param {
            name: format!("{}.weight", def.name),
            shape: if k == 1 {
                vec![oc, ic]
            } else {
                vec![oc, ic, k, k]
            },
            data: weight,
            group: def.group,
            is_bias: false,
        });
        params.push(Param {
            name: format!("{}.bias", def.name),
            shape: vec![oc],
            data: vec![T::zero(); oc],
            group: def.group,
            is_bias: true,
        });
    }
    ModelState {
        arch: arch.clone(),
        params,
    }
}

/// Logits, per-pixel softmax, and the pre-classifier feature planes.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor3<T>,
    pub probs: Tensor3<T>,
    pub features: Tensor3<T>,
}

/// Cached activations needed by the reverse pass.
pub struct Trace<T> {
    input: Tensor3<T>,
    z: Vec<Tensor3<T>>,   // pre-activations per conv layer (z[7] = logits)
    p1: Tensor3<T>,       // pooled skip A (input to enc_down)
    p2: Tensor3<T>,       // pooled skip B (input to bottleneck)
    u1: Tensor3<T>,       // upsampled bottleneck (input to dec_up1)
    u2: Tensor3<T>,       // upsampled dec1 (input to dec_up2)
    d2: Tensor3<T>,       // input to feat_head
    features: Tensor3<T>, // input to classifier
}

fn check_input<T: Scalar>(state: &ModelState<T>, input: &Tensor3<T>) -> Result<()> {
    if input.ch != state.arch.in_channels {
        return Err(IdmError::Contract(format!(
            "input has {} channels, arch expects {}",
            input.ch, state.arch.in_channels
        )));
    }
    if input.h % 4 != 0 || input.w % 4 != 0 || input.h < 4 || input.w < 4 {
        return Err(IdmError::Contract(format!(
            "spatial dims {}x{} must be positive multiples of 4",
            input.h, input.w
        )));
    }
    Ok(())
}

/// Forward pass keeping the trace for a subsequent [`backward`].
pub fn forward_traced<T: Scalar>(
    state: &ModelState<T>,
    input: &Tensor3<T>,
) -> Result<(ForwardOutput<T>, Trace<T>)> {
    check_input(state, input)?;
    let arch = &state.arch;
    let [w1, w2, w3] = arch.widths;

    let z0 = conv3x3(input, state.weight(0), state.bias(0), w1);
    let a0 = silu(&z0);
    let z1 = conv3x3(&a0, state.weight(1), state.bias(1), w1);
    let a1 = silu(&z1);
    let p1 = avg_pool2(&a1);
    let z2 = conv3x3(&p1, state.weight(2), state.bias(2), w2);
    let a2 = silu(&z2);
    let p2 = avg_pool2(&a2);
    let z3 = conv3x3(&p2, state.weight(3), state.bias(3), w3);
    let a3 = silu(&z3);
    let u1 = upsample2(&a3);
    let mut z4 = conv3x3(&u1, state.weight(4), state.bias(4), w2);
    for (v, &skip) in z4.as_mut_slice().iter_mut().zip(a2.as_slice()) {
        *v = *v + skip;
    }
    let a4 = silu(&z4);
    let u2 = upsample2(&a4);
    let mut z5 = conv3x3(&u2, state.weight(5), state.bias(5), w1);
    for (v, &skip) in z5.as_mut_slice().iter_mut().zip(a1.as_slice()) {
        *v = *v + skip;
    }
    let a5 = silu(&z5);
    let z6 = conv3x3(&a5, state.weight(6), state.bias(6), arch.feat_dim);
    let features = silu(&z6);
    let logits = conv1x1(&features, state.weight(7), state.bias(7), arch.num_classes);
    let probs = softmax_channels(&logits);

    let out = ForwardOutput {
        logits: logits.clone(),
        probs,
        features: features.clone(),
    };
    let trace = Trace {
        input: input.clone(),
        z: vec![z0, z1, z2, z3, z4, z5, z6, logits],
        p1,
        p2,
        u1,
        u2,
        d2: a5,
        features,
    };
    Ok((out, trace))
}

/// Forward pass on an f32 image, converting into the working precision.
pub fn forward<T: Scalar>(state: &ModelState<T>, image: &Image) -> Result<ForwardOutput<T>> {
    let input = image.cast::<T>();
    forward_traced(state, &input).map(|(out, _)| out)
}

/// Per-parameter gradient arrays, aligned with `ModelState::params`.
pub type Grads<T> = Vec<Vec<T>>;

pub fn zero_grads<T: Scalar>(state: &ModelState<T>) -> Grads<T> {
    state.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
}

/// Reverse pass. `d_logits` and `d_features` are the loss cotangents on the
/// classifier output and the feature planes; gradients accumulate into
/// `grads` so batches can share one buffer.
pub fn backward<T: Scalar>(
    state: &ModelState<T>,
    trace: &Trace<T>,
    d_logits: &Tensor3<T>,
    d_features: Option<&Tensor3<T>>,
    grads: &mut Grads<T>,
) -> Result<()> {
    if !d_logits.same_shape(&trace.z[7]) {
        return Err(IdmError::Contract(
            "d_logits shape does not match traced logits".into(),
        ));
    }
    let arch = &state.arch;
    let [w1, w2, _w3] = arch.widths;

    // classifier
    let (dw, db) = grads.split_at_mut(15);
    conv1x1_back_params(&trace.features, d_logits, &mut dw[14], &mut db[0]);
    let mut d_feat = conv1x1_back_input(d_logits, state.weight(7), arch.feat_dim);
    if let Some(extra) = d_features {
        if !extra.same_shape(&trace.features) {
            return Err(IdmError::Contract(
                "d_features shape does not match traced features".into(),
            ));
        }
        for (g, &e) in d_feat.as_mut_slice().iter_mut().zip(extra.as_slice()) {
            *g = *g + e;
        }
    }

    // feat_head
    let d_z6 = silu_back(&trace.z[6], &d_feat);
    {
        let (w, b) = grads.split_at_mut(13);
        conv3x3_back_params(&trace.d2, &d_z6, &mut w[12], &mut b[0]);
    }
    let d_a5 = conv3x3_back_input(&d_z6, state.weight(6), w1);

    // dec_up2 (+ skip A)
    let d_z5 = silu_back(&trace.z[5], &d_a5);
    {
        let (w, b) = grads.split_at_mut(11);
        conv3x3_back_params(&trace.u2, &d_z5, &mut w[10], &mut b[0]);
    }
    let d_u2 = conv3x3_back_input(&d_z5, state.weight(5), w2);
    let mut d_a1 = d_z5; // skip-add passes the gradient through unchanged
    let d_a4 = upsample2_back(&d_u2);

    // dec_up1 (+ skip B)
    let d_z4 = silu_back(&trace.z[4], &d_a4);
    {
        let (w, b) = grads.split_at_mut(9);
        conv3x3_back_params(&trace.u1, &d_z4, &mut w[8], &mut b[0]);
    }
    let d_u1 = conv3x3_back_input(&d_z4, state.weight(4), arch.widths[2]);
    let mut d_a2 = d_z4;
    let d_a3 = upsample2_back(&d_u1);

    // bottleneck
    let d_z3 = silu_back(&trace.z[3], &d_a3);
    {
        let (w, b) = grads.split_at_mut(7);
        conv3x3_back_params(&trace.p2, &d_z3, &mut w[6], &mut b[0]);
    }
    let d_p2 = conv3x3_back_input(&d_z3, state.weight(3), w2);
    for (g, &v) in d_a2.as_mut_slice().iter_mut().zip(avg_pool2_back(&d_p2).as_slice()) {
        *g = *g + v;
    }

    // enc_down
    let d_z2 = silu_back(&trace.z[2], &d_a2);
    {
        let (w, b) = grads.split_at_mut(5);
        conv3x3_back_params(&trace.p1, &d_z2, &mut w[4], &mut b[0]);
    }
    let d_p1 = conv3x3_back_input(&d_z2, state.weight(2), w1);
    for (g, &v) in d_a1.as_mut_slice().iter_mut().zip(avg_pool2_back(&d_p1).as_slice()) {
        *g = *g + v;
    }

    // enc_mid
    let d_z1 = silu_back(&trace.z[1], &d_a1);
    let a0 = silu(&trace.z[0]); // recomputed; cheaper than caching
    {
        let (w, b) = grads.split_at_mut(3);
        conv3x3_back_params(&a0, &d_z1, &mut w[2], &mut b[0]);
    }
    let d_a0 = conv3x3_back_input(&d_z1, state.weight(1), w1);

    // enc_in
    let d_z0 = silu_back(&trace.z[0], &d_a0);
    {
        let (w, b) = grads.split_at_mut(1);
        conv3x3_back_params(&trace.input, &d_z0, &mut w[0], &mut b[0]);
    }
    Ok(())
}

/// EMA teacher: a non-gradient copy of the student.
#[derive(Debug, Clone)]
pub struct TeacherState<T> {
    pub model: ModelState<T>,
    pub alpha: f64,
}

impl<T: Scalar> TeacherState<T> {
    pub fn from_student(student: &ModelState<T>, alpha: f64) -> Self {
        TeacherState {
            model: student.clone(),
            alpha,
        }
    }
}

/// `teacher' = alpha * teacher + (1 - alpha) * student`, element-wise.
pub fn ema_update<T: Scalar>(
    teacher: &mut TeacherState<T>,
    student: &ModelState<T>,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IdmError::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    if teacher.model.params.len() != student.params.len() {
        return Err(IdmError::Contract("teacher/student schema mismatch".into()));
    }
    let a: T = s(alpha);
    let one_minus: T = s(1.0 - alpha);
    for (tp, sp) in teacher.model.params.iter_mut().zip(&student.params) {
        if tp.data.len() != sp.data.len() || tp.name != sp.name {
            return Err(IdmError::Contract(format!(
                "teacher/student schema mismatch at {}",
                tp.name
            )));
        }
        for (t, &v) in tp.data.iter_mut().zip(&sp.data) {
            *t = a * *t + one_minus * v;
        }
    }
    Ok(())
}

/// Argmax of the teacher's per-pixel probabilities; ties break toward the
/// lowest class index.
pub fn pseudo_label<T: Scalar>(teacher: &TeacherState<T>, image: &Image) -> Result<LabelMap> {
    pseudo_label_confident(teacher, image, None)
}

/// Like [`pseudo_label`], but pixels whose max probability falls below the
/// threshold become the ignore sentinel.
pub fn pseudo_label_confident<T: Scalar>(
    teacher: &TeacherState<T>,
    image: &Image,
    confidence_threshold: Option<f64>,
) -> Result<LabelMap> {
    let out = forward(&teacher.model, image)?;
    Ok(argmax_labels(&out.probs, confidence_threshold))
}

/// Per-pixel argmax over channel planes; strictly-greater comparison keeps
/// the lowest index on ties.
pub fn argmax_labels<T: Scalar>(probs: &Tensor3<T>, confidence_threshold: Option<f64>) -> LabelMap {
    let (ch, h, w) = (probs.ch, probs.h, probs.w);
    let mut label = LabelMap::filled(h, w, 0);
    let n = h * w;
    for i in 0..n {
        let mut best = probs.plane(0)[i];
        let mut best_c = 0u8;
        for c in 1..ch {
            let v = probs.plane(c)[i];
            if v > best {
                best = v;
                best_c = c as u8;
            }
        }
        let value = match confidence_threshold {
            Some(th) if up(best) < th => crate::tensor::IGNORE_LABEL,
            _ => best_c,
        };
        label.as_mut_slice()[i] = value;
    }
    label
}
