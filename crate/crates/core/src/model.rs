//! The three parameter-sharing topologies and their multi-head forward pass.
//!
//! Every topology shares the same encoder design (three 3x3 conv + ReLU + 2x2 max-pool
//! stages taking 48x48 RGB down to 6x6) optionally followed by a non-local block.
//!
//! * `Hierarchical`: one encoder. Age reads the encoder through two dense layers; gender adds
//!   a conv before its two dense layers; ethnicity stacks its own conv on top of the gender
//!   conv output, then two dense layers.
//! * `Hard`: one encoder, each task a two-layer dense head on the encoder output.
//! * `Soft`: one encoder (and non-local block) per task, each with a two-layer dense head.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Conv2DParams, Conv2d, Dense, DenseParams, NonLocal, NonLocalParams, LINEAR_GAIN, RELU_GAIN};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const INPUT_HW: usize = 48;
pub const INPUT_CHANNELS: usize = 3;
pub const NUM_ETHNICITIES: usize = 5;
/// Allowed parameter count of one encoder plus its non-local block.
pub const ENCODER_BUDGET: RangeInclusive<usize> = 250_000..=350_000;

const KERNEL: usize = 3;
const POOL: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sharing {
    Hard,
    Soft,
    Hierarchical,
}

impl Sharing {
    pub fn as_str(self) -> &'static str {
        match self {
            Sharing::Hard => "hard",
            Sharing::Soft => "soft",
            Sharing::Hierarchical => "hierarchical",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Sharing::Hard => 0,
            Sharing::Soft => 1,
            Sharing::Hierarchical => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        [Sharing::Hard, Sharing::Soft, Sharing::Hierarchical]
            .into_iter()
            .find(|s| s.code() == code)
    }
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hard" => Ok(Sharing::Hard),
            "soft" => Ok(Sharing::Soft),
            "hierarchical" => Ok(Sharing::Hierarchical),
            other => Err(Error::InvalidSpec(format!("unknown sharing kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Age,
    Gender,
    Ethnicity,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Age, Task::Gender, Task::Ethnicity];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Age => "age",
            Task::Gender => "gender",
            Task::Ethnicity => "ethnicity",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" => Ok(Task::Age),
            "gender" => Ok(Task::Gender),
            "ethnicity" | "race" => Ok(Task::Ethnicity),
            other => Err(Error::InvalidArgument {
                op: "task",
                reason: format!("unknown head `{other}`"),
            }),
        }
    }
}

/// Declarative topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub sharing: Sharing,
    pub use_non_local: bool,
    pub encoder_channels: [usize; 3],
    pub head_hidden: usize,
    pub input_hw: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            sharing: Sharing::Hierarchical,
            use_non_local: true,
            encoder_channels: [48, 96, 192],
            head_hidden: 128,
            input_hw: INPUT_HW,
        }
    }
}

impl ModelSpec {
    pub fn with_sharing(sharing: Sharing) -> Self {
        Self {
            sharing,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) {
            return Err(Error::InvalidSpec("encoder channels must be positive".into()));
        }
        if self.input_hw != INPUT_HW {
            return Err(Error::InvalidSpec(format!(
                "input resolution must be {INPUT_HW}, got {}",
                self.input_hw
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::InvalidSpec("head_hidden must be positive".into()));
        }
        if self.use_non_local && self.encoder_channels[2] % 2 != 0 {
            return Err(Error::InvalidSpec(
                "non-local block needs an even channel count after the encoder".into(),
            ));
        }
        Ok(())
    }

    /// Spatial extent of the encoder output.
    pub fn feature_hw(&self) -> usize {
        self.input_hw / (POOL * POOL * POOL)
    }

    /// Flattened length of one encoder-resolution feature map.
    pub fn feature_len(&self) -> usize {
        self.encoder_channels[2] * self.feature_hw() * self.feature_hw()
    }

    /// `(encoder prefix, non-local prefix)` for every encoder copy.
    pub fn encoder_prefixes(&self) -> Vec<(String, String)> {
        match self.sharing {
            Sharing::Soft => Task::ALL
                .iter()
                .map(|t| (format!("encoder_{t}"), format!("non_local_{t}")))
                .collect(),
            _ => vec![("encoder".to_string(), "non_local".to_string())],
        }
    }

    fn prefixes_for(&self, task: Task) -> (String, String) {
        match self.sharing {
            Sharing::Soft => (format!("encoder_{task}"), format!("non_local_{task}")),
            _ => ("encoder".to_string(), "non_local".to_string()),
        }
    }

    /// Prefixes of a task's own head layers.
    pub fn head_prefix(task: Task) -> &'static str {
        task.as_str()
    }
}

fn task_outputs(task: Task) -> usize {
    match task {
        Task::Age | Task::Gender => 1,
        Task::Ethnicity => NUM_ETHNICITIES,
    }
}

/// Builds the parameters for `spec`, rejecting encoders outside [`ENCODER_BUDGET`].
pub fn build_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    let params = build_model_unchecked(spec, seed)?;
    for (enc, nl) in spec.encoder_prefixes() {
        let mut count = params.param_count(&enc)?;
        if spec.use_non_local {
            count += params.param_count(&nl)?;
        }
        if !ENCODER_BUDGET.contains(&count) {
            return Err(Error::ParameterBudget {
                count,
                min: *ENCODER_BUDGET.start(),
                max: *ENCODER_BUDGET.end(),
            });
        }
    }
    Ok(params)
}

/// Builds without the encoder budget check, for reduced-width experiments and gradient checks.
pub fn build_model_unchecked<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let [c1, c2, c3] = spec.encoder_channels;
    for (enc, nl) in spec.encoder_prefixes() {
        let mut in_ch = INPUT_CHANNELS;
        for (i, out_ch) in [c1, c2, c3].into_iter().enumerate() {
            Conv2DParams::init(in_ch, out_ch, KERNEL, &mut rng).store_into(&mut store, &format!("{enc}/conv{}", i + 1))?;
            in_ch = out_ch;
        }
        if spec.use_non_local {
            NonLocalParams::init(c3, &mut rng)?.store_into(&mut store, &nl)?;
        }
    }
    let feat = spec.feature_len();
    for task in Task::ALL {
        let head = ModelSpec::head_prefix(task);
        if spec.sharing == Sharing::Hierarchical && task != Task::Age {
            Conv2DParams::init(c3, c3, KERNEL, &mut rng).store_into(&mut store, &format!("{head}/conv"))?;
        }
        DenseParams::init(feat, spec.head_hidden, RELU_GAIN, &mut rng).store_into(&mut store, &format!("{head}/fc1"))?;
        DenseParams::init(spec.head_hidden, task_outputs(task), LINEAR_GAIN, &mut rng)
            .store_into(&mut store, &format!("{head}/fc2"))?;
    }
    Ok(store)
}

/// Sum of element counts under `prefix`.
pub fn param_count<T: Scalar>(params: &ParamStore<T>, prefix: &str) -> Result<usize> {
    params.param_count(prefix)
}

/// Tape handles of every head output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    /// `(n, 1)` years.
    pub age: Var,
    /// `(n, 1)`
    pub gender_logit: Var,
    /// `(n, 1)` probability of class 1 (female).
    pub gender_prob: Var,
    /// `(n, 5)`
    pub ethnicity_logits: Var,
    /// `(n, 5)`
    pub ethnicity_probs: Var,
    /// Last encoder feature map (after the non-local block when enabled) feeding each task,
    /// indexed by [`Task::index`].
    pub features: [Var; 3],
}

fn conv_block<T: Scalar>(tape: &mut Tape<T>, x: Var, prefix: &str, pool: bool) -> Result<Var> {
    let layer = Conv2d::from_tape(tape, prefix, 1, KERNEL / 2)?;
    let y = layers::conv2d(tape, x, &layer)?;
    let y = tape.relu(y);
    if pool {
        layers::maxpool2d(tape, y, POOL)
    } else {
        Ok(y)
    }
}

fn encoder<T: Scalar>(tape: &mut Tape<T>, spec: &ModelSpec, x: Var, enc: &str, nl: &str) -> Result<Var> {
    let mut h = x;
    for i in 1..=3 {
        h = conv_block(tape, h, &format!("{enc}/conv{i}"), true)?;
    }
    if spec.use_non_local {
        let block = NonLocal::from_tape(tape, nl)?;
        h = layers::non_local(tape, h, &block)?;
    }
    Ok(h)
}

fn dense_head<T: Scalar>(tape: &mut Tape<T>, x: Var, head: &str) -> Result<Var> {
    let fc1 = Dense::from_tape(tape, &format!("{head}/fc1"))?;
    let h = layers::dense(tape, x, &fc1)?;
    let h = tape.relu(h);
    let fc2 = Dense::from_tape(tape, &format!("{head}/fc2"))?;
    layers::dense(tape, h, &fc2)
}

/// Runs the network on `input` (`n x 3 x 48 x 48`). Parameters must already be registered
/// on the tape, e.g. via [`ParamStore::register`].
pub fn forward_on_tape<T: Scalar>(tape: &mut Tape<T>, spec: &ModelSpec, input: Var) -> Result<HeadOutputs> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != [INPUT_CHANNELS, spec.input_hw, spec.input_hw] {
        return Err(Error::InvalidArgument {
            op: "forward",
            reason: format!(
                "expected input n x {INPUT_CHANNELS} x {hw} x {hw}, got {shape:?}",
                hw = spec.input_hw
            ),
        });
    }
    let (age, gender_logit, ethnicity_logits, features) = match spec.sharing {
        Sharing::Hierarchical => {
            let (enc, nl) = spec.prefixes_for(Task::Age);
            let shared = encoder(tape, spec, input, &enc, &nl)?;
            let age = dense_head(tape, shared, "age")?;
            let gender_features = conv_block(tape, shared, "gender/conv", false)?;
            let gender = dense_head(tape, gender_features, "gender")?;
            let eth_features = conv_block(tape, gender_features, "ethnicity/conv", false)?;
            let eth = dense_head(tape, eth_features, "ethnicity")?;
            (age, gender, eth, [shared; 3])
        }
        Sharing::Hard => {
            let (enc, nl) = spec.prefixes_for(Task::Age);
            let shared = encoder(tape, spec, input, &enc, &nl)?;
            let age = dense_head(tape, shared, "age")?;
            let gender = dense_head(tape, shared, "gender")?;
            let eth = dense_head(tape, shared, "ethnicity")?;
            (age, gender, eth, [shared; 3])
        }
        Sharing::Soft => {
            let mut feats = [input; 3];
            for task in Task::ALL {
                let (enc, nl) = spec.prefixes_for(task);
                feats[task.index()] = encoder(tape, spec, input, &enc, &nl)?;
            }
            let age = dense_head(tape, feats[0], "age")?;
            let gender = dense_head(tape, feats[1], "gender")?;
            let eth = dense_head(tape, feats[2], "ethnicity")?;
            (age, gender, eth, feats)
        }
    };
    let gender_prob = tape.sigmoid(gender_logit);
    let ethnicity_probs = tape.softmax(ethnicity_logits);
    Ok(HeadOutputs {
        age,
        gender_logit,
        gender_prob,
        ethnicity_logits,
        ethnicity_probs,
        features,
    })
}

/// Per-sample head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTriple<T> {
    pub age: Vec<T>,
    pub gender_prob: Vec<T>,
    pub ethnicity_probs: Vec<[T; NUM_ETHNICITIES]>,
}

impl<T: Scalar> PredictionTriple<T> {
    pub fn len(&self) -> usize {
        self.age.len()
    }

    pub fn is_empty(&self) -> bool {
        self.age.is_empty()
    }

    pub fn from_tape(tape: &Tape<T>, heads: &HeadOutputs) -> Self {
        let ethnicity_probs = tape
            .value(heads.ethnicity_probs)
            .data()
            .chunks(NUM_ETHNICITIES)
            .map(|row| std::array::from_fn(|i| row[i]))
            .collect();
        Self {
            age: tape.value(heads.age).data().to_vec(),
            gender_prob: tape.value(heads.gender_prob).data().to_vec(),
            ethnicity_probs,
        }
    }

    /// Gender decisions: probability `>= 0.5` means class 1 (female).
    pub fn gender_classes(&self) -> Vec<usize> {
        let half = T::from_f64_lossy(0.5);
        self.gender_prob.iter().map(|&p| usize::from(p >= half)).collect()
    }

    /// Ethnicity decisions: argmax with ties going to the lowest index.
    pub fn ethnicity_classes(&self) -> Vec<usize> {
        self.ethnicity_probs.iter().map(|row| argmax(row)).collect()
    }

    pub fn extend(&mut self, other: PredictionTriple<T>) {
        self.age.extend(other.age);
        self.gender_prob.extend(other.gender_prob);
        self.ethnicity_probs.extend(other.ethnicity_probs);
    }

    pub fn empty() -> Self {
        Self {
            age: Vec::new(),
            gender_prob: Vec::new(),
            ethnicity_probs: Vec::new(),
        }
    }
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inference-only forward pass.
pub fn forward<T: Scalar>(params: &ParamStore<T>, spec: &ModelSpec, batch: &Tensor<T>) -> Result<PredictionTriple<T>> {
    let mut tape = Tape::inference();
    params.register(&mut tape)?;
    let x = tape.constant(batch.clone());
    let heads = forward_on_tape(&mut tape, spec, x)?;
    Ok(PredictionTriple::from_tape(&tape, &heads))
}
