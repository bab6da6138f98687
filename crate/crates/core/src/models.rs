// SPDX-License-Identifier: Apache-2.0

//! Encoder-decoder networks for static and transient maps, padded inference
//! on any die size, and the `EDGEMODEL` container.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::features::{FeatureError, FeatureTensor, Features, NormStats, Task};
use crate::gridio::{crop_plane, pad_plane, CropRecord, GridError, GridKind, GridMap, GridSequence};
use crate::nn::{
    concat_channels, maxpool2, maxpool2_backward, relu, relu_backward, split_channels, upsample2,
    upsample2_backward, Conv2d, ConvLstmCell, ConvTranspose2d, LstmState, LstmStepCache, Network, NnError,
    Param, PoolRecord, Result as NnResult, Scalar, Tensor,
};
use crate::rng::Pcg32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Config(String),
    #[error("model expects {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("model was trained for task {model}, not {requested}")]
    TaskMismatch { model: Task, requested: Task },
    #[error("{path}: i/o error: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not an EDGEMODEL file (bad magic)")]
    BadMagic,
    #[error("unsupported version byte {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("model file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("model header: {0}")]
    Header(String),
    #[error("layer `{name}`: {detail}")]
    Layer { name: String, detail: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn header_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Header(msg.into()))
}

/// `(kernel, filters)` of one encoder stage; the decoder mirrors it.
pub type Stage = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEdgeConfig {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
}

impl StaticEdgeConfig {
    pub fn thermedge() -> Self {
        Self {
            in_channels: 1,
            stages: vec![(5, 64), (3, 32), (3, 16)],
        }
    }

    pub fn iredge() -> Self {
        Self {
            in_channels: 3,
            stages: vec![(3, 64), (3, 32), (3, 16)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_stages(self.in_channels, &self.stages)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransientEdgeConfig {
    pub in_channels: usize,
    pub stages: Vec<Stage>,
    pub lstm_kernel: usize,
    pub lstm_filters: usize,
    pub frames: usize,
    pub dt_seconds: f64,
}

impl Default for TransientEdgeConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stages: vec![(5, 64), (3, 32)],
            lstm_kernel: 7,
            lstm_filters: 16,
            frames: 200,
            dt_seconds: 15.0,
        }
    }
}

impl TransientEdgeConfig {
    pub fn validate(&self) -> Result<()> {
        validate_stages(self.in_channels, &self.stages)?;
        if self.lstm_kernel % 2 == 0 || self.lstm_filters == 0 {
            return Err(ModelError::Config(format!(
                "ConvLSTM needs an odd kernel and at least one filter, got {}x{} / {}",
                self.lstm_kernel, self.lstm_kernel, self.lstm_filters
            )));
        }
        if self.frames == 0 || !(self.dt_seconds.is_finite() && self.dt_seconds > 0.0) {
            return Err(ModelError::Config("frames and dt must be positive".into()));
        }
        Ok(())
    }
}

fn validate_stages(in_channels: usize, stages: &[Stage]) -> Result<()> {
    if in_channels == 0 {
        return Err(ModelError::Config("zero input channels".into()));
    }
    if stages.is_empty() {
        return Err(ModelError::Config("no encoder stages".into()));
    }
    if let Some(&(k, f)) = stages.iter().find(|&&(k, f)| k % 2 == 0 || f == 0) {
        return Err(ModelError::Config(format!("stage ({k}, {f}) needs an odd kernel and filters > 0")));
    }
    Ok(())
}

/// Receptive field, in tiles, of one bottleneck pixel.
///
/// `bottleneck_kernels` are extra same-padded convolutions applied at the
/// bottleneck resolution (the ConvLSTM gates).
pub fn receptive_field(stages: &[Stage], bottleneck_kernels: &[usize]) -> usize {
    let (mut field, mut jump) = (1, 1);
    for &(k, _) in stages {
        field += (k - 1) * jump;
        field += jump;
        jump *= 2;
    }
    for &k in bottleneck_kernels {
        field += (k - 1) * jump;
    }
    field
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Static(StaticEdgeConfig),
    Transient(TransientEdgeConfig),
}

impl Architecture {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::ThermalStatic => Architecture::Static(StaticEdgeConfig::thermedge()),
            Task::IrStatic => Architecture::Static(StaticEdgeConfig::iredge()),
            Task::ThermalTransient => Architecture::Transient(TransientEdgeConfig::default()),
        }
    }

    pub fn stages(&self) -> &[Stage] {
        match self {
            Architecture::Static(c) => &c.stages,
            Architecture::Transient(c) => &c.stages,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::Static(c) => c.in_channels,
            Architecture::Transient(c) => c.in_channels,
        }
    }

    pub fn depth(&self) -> usize {
        self.stages().len()
    }

    /// Input sides are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn receptive_field(&self) -> usize {
        match self {
            Architecture::Static(c) => receptive_field(&c.stages, &[]),
            Architecture::Transient(c) => receptive_field(&c.stages, &[c.lstm_kernel, c.lstm_kernel]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Static(c) => c.validate(),
            Architecture::Transient(c) => c.validate(),
        }
    }

    fn header_lines(&self, out: &mut String) {
        let stages = self
            .stages()
            .iter()
            .map(|(k, f)| format!("{k}x{f}"))
            .collect::<Vec<_>>()
            .join(",");
        match self {
            Architecture::Static(c) => {
                let _ = writeln!(out, "arch=static");
                let _ = writeln!(out, "in_channels={}", c.in_channels);
                let _ = writeln!(out, "stages={stages}");
            }
            Architecture::Transient(c) => {
                let _ = writeln!(out, "arch=transient");
                let _ = writeln!(out, "in_channels={}", c.in_channels);
                let _ = writeln!(out, "stages={stages}");
                let _ = writeln!(out, "lstm_kernel={}", c.lstm_kernel);
                let _ = writeln!(out, "lstm_filters={}", c.lstm_filters);
                let _ = writeln!(out, "frames={}", c.frames);
                let _ = writeln!(out, "dt_seconds={}", c.dt_seconds);
            }
        }
    }

    fn from_header(h: &BTreeMap<String, String>) -> Result<Self> {
        let in_channels = header_num(h, "in_channels")?;
        let stages = header_get(h, "stages")?
            .split(',')
            .map(|s| {
                let (k, f) = s.split_once('x').ok_or_else(|| ModelError::Header(format!("bad stage `{s}`")))?;
                match (k.parse(), f.parse()) {
                    (Ok(k), Ok(f)) => Ok((k, f)),
                    _ => header_err(format!("bad stage `{s}`")),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let arch = match header_get(h, "arch")? {
            "static" => Architecture::Static(StaticEdgeConfig { in_channels, stages }),
            "transient" => Architecture::Transient(TransientEdgeConfig {
                in_channels,
                stages,
                lstm_kernel: header_num(h, "lstm_kernel")?,
                lstm_filters: header_num(h, "lstm_filters")?,
                frames: header_num(h, "frames")?,
                dt_seconds: header_num(h, "dt_seconds")?,
            }),
            other => return header_err(format!("unknown arch `{other}`")),
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn header_get<'a>(h: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| ModelError::Header(format!("missing key `{key}`")))
}

fn header_num<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = header_get(h, key)?;
    v.parse()
        .map_err(|_| ModelError::Header(format!("bad value `{v}` for `{key}`")))
}

// ---------------------------------------------------------------------------
// Shared U-Net body

#[derive(Debug, Clone, PartialEq)]
struct UNet<T> {
    enc: Vec<Conv2d<T>>,
    /// Indexed by level: `dec[s]` restores the resolution of `enc[s]`.
    dec: Vec<ConvTranspose2d<T>>,
    head: Conv2d<T>,
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    inputs: Vec<Tensor<T>>,
    acts: Vec<Tensor<T>>,
    pools: Vec<PoolRecord>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    cats: Vec<Tensor<T>>,
    acts: Vec<Tensor<T>>,
}

impl<T: Scalar> UNet<T> {
    fn new(in_channels: usize, stages: &[Stage], bottleneck_channels: usize, rng: &mut Pcg32) -> Self {
        let mut enc = Vec::with_capacity(stages.len());
        let mut c = in_channels;
        for &(k, f) in stages {
            enc.push(Conv2d::new(c, f, k, rng));
            c = f;
        }
        let mut dec = Vec::with_capacity(stages.len());
        for (s, &(k, f)) in stages.iter().enumerate() {
            let below = stages.get(s + 1).map_or(bottleneck_channels, |&(_, f)| f);
            dec.push(ConvTranspose2d::new(below + f, f, k, rng));
        }
        let head = Conv2d::new(stages[0].1, 1, 1, rng);
        Self { enc, dec, head }
    }

    fn encode(&self, x: &Tensor<T>) -> NnResult<(Tensor<T>, EncCache<T>)> {
        let d = self.enc.len();
        let mut cache = EncCache {
            inputs: Vec::with_capacity(d),
            acts: Vec::with_capacity(d),
            pools: Vec::with_capacity(d),
        };
        let mut h = x.clone();
        for conv in &self.enc {
            let a = relu(&conv.forward(&h)?);
            let (p, rec) = maxpool2(&a)?;
            cache.inputs.push(h);
            cache.acts.push(a);
            cache.pools.push(rec);
            h = p;
        }
        Ok((h, cache))
    }

    fn decode(&self, z: Tensor<T>, enc: &EncCache<T>) -> NnResult<(Tensor<T>, DecCache<T>)> {
        let d = self.dec.len();
        let mut cats = Vec::with_capacity(d);
        let mut acts = Vec::with_capacity(d);
        let mut z = z;
        for s in (0..d).rev() {
            let cat = concat_channels(&upsample2(&z), &enc.acts[s])?;
            let a = relu(&self.dec[s].forward(&cat)?);
            cats.push(cat);
            z = a.clone();
            acts.push(a);
        }
        cats.reverse();
        acts.reverse();
        let y = self.head.forward(&acts[0])?;
        Ok((y, DecCache { cats, acts }))
    }

    /// Returns the gradient at the bottleneck input of the decoder and one skip gradient per level.
    fn backward_decode(
        &mut self,
        enc: &EncCache<T>,
        dec: &DecCache<T>,
        dy: &Tensor<T>,
    ) -> NnResult<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut dz = self.head.backward(&dec.acts[0], dy, true)?.expect("dx requested");
        let mut dskips = Vec::with_capacity(self.dec.len());
        for s in 0..self.dec.len() {
            let dpre = relu_backward(&dec.acts[s], &dz);
            let dcat = self.dec[s].backward(&dec.cats[s], &dpre, true)?.expect("dx requested");
            let c_up = dec.cats[s].c() - enc.acts[s].c();
            let (du, dskip) = split_channels(&dcat, c_up)?;
            dskips.push(dskip);
            dz = upsample2_backward(&du)?;
        }
        Ok((dz, dskips))
    }

    fn backward_encode(&mut self, enc: &EncCache<T>, dbottleneck: Tensor<T>, dskips: &[Tensor<T>]) -> NnResult<()> {
        let mut dh = dbottleneck;
        for s in (0..self.enc.len()).rev() {
            let mut da = maxpool2_backward(&enc.pools[s], &dh)?;
            da.add_assign(&dskips[s]);
            let dpre = relu_backward(&enc.acts[s], &da);
            if let Some(dx) = self.enc[s].backward(&enc.inputs[s], &dpre, s > 0)? {
                dh = dx;
            }
        }
        Ok(())
    }

    fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Param<T>)>) {
        for (s, c) in self.enc.iter().enumerate() {
            out.push((format!("enc{s}.weight"), &c.weight));
            out.push((format!("enc{s}.bias"), &c.bias));
        }
        for (s, c) in self.dec.iter().enumerate() {
            out.push((format!("dec{s}.weight"), &c.weight));
            out.push((format!("dec{s}.bias"), &c.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for c in &mut self.enc {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for c in &mut self.dec {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, in_channels: usize, multiple: usize) -> Result<()> {
    if x.c() != in_channels {
        return Err(ModelError::ChannelMismatch {
            expected: in_channels,
            found: x.c(),
        });
    }
    if x.h() % multiple != 0 || x.w() % multiple != 0 || x.h() == 0 || x.w() == 0 {
        return Err(NnError::Shape {
            op: "network input",
            detail: format!("{}x{} is not a positive multiple of {multiple}", x.h(), x.w()),
        }
        .into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Static network

#[derive(Debug, Clone, PartialEq)]
pub struct StaticEdge<T> {
    pub config: StaticEdgeConfig,
    body: UNet<T>,
}

/// Activations recorded by [`StaticEdge::forward_train`].
#[derive(Debug, Clone)]
pub struct StaticCache<T> {
    enc: EncCache<T>,
    dec: DecCache<T>,
}

impl<T: Scalar> StaticEdge<T> {
    pub fn build(config: StaticEdgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::stream(seed, 0, "init");
        let bottleneck = config.stages.last().expect("validated").1;
        let body = UNet::new(config.in_channels, &config.stages, bottleneck, &mut rng);
        Ok(Self { config, body })
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.config.stages.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_train(x)?.0)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, StaticCache<T>)> {
        check_input(x, self.config.in_channels, self.size_multiple())?;
        let (z, enc) = self.body.encode(x)?;
        let (y, dec) = self.body.decode(z, &enc)?;
        Ok((y.ensure_finite("static network forward")?, StaticCache { enc, dec }))
    }

    /// Accumulates parameter gradients for output gradient `dy`.
    pub fn backward(&mut self, cache: &StaticCache<T>, dy: &Tensor<T>) -> Result<()> {
        let (dz, dskips) = self.body.backward_decode(&cache.enc, &cache.dec, dy)?;
        self.body.backward_encode(&cache.enc, dz, &dskips)?;
        Ok(())
    }
}

impl<T: Scalar> Network<T> for StaticEdge<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.body.named_params(&mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.body.params_mut(&mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Transient network

#[derive(Debug, Clone, PartialEq)]
pub struct TransientEdge<T> {
    pub config: TransientEdgeConfig,
    body: UNet<T>,
    lstm_enc: ConvLstmCell<T>,
    lstm_dec: ConvLstmCell<T>,
}

#[derive(Debug, Clone)]
struct FrameCache<T> {
    enc: EncCache<T>,
    dec: DecCache<T>,
    lstm_enc: LstmStepCache<T>,
    lstm_dec: LstmStepCache<T>,
}

/// Per-frame activations recorded by [`TransientEdge::forward_train`].
#[derive(Debug, Clone)]
pub struct SequenceCache<T> {
    frames: Vec<FrameCache<T>>,
}

impl<T: Scalar> TransientEdge<T> {
    pub fn build(config: TransientEdgeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::stream(seed, 0, "init");
        let body = UNet::new(config.in_channels, &config.stages, config.lstm_filters, &mut rng);
        let bottleneck = config.stages.last().expect("validated").1;
        let (k, hid) = (config.lstm_kernel, config.lstm_filters);
        let lstm_enc = ConvLstmCell::new(bottleneck, hid, k, &mut rng);
        let lstm_dec = ConvLstmCell::new(hid, hid, k, &mut rng);
        Ok(Self {
            config,
            body,
            lstm_enc,
            lstm_dec,
        })
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.config.stages.len()
    }

    pub fn forward(&self, frames: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(self.forward_train(frames)?.0)
    }

    /// Runs the frames in order with state carried across them, starting from zero state.
    pub fn forward_train(&self, frames: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, SequenceCache<T>)> {
        let first = frames
            .first()
            .ok_or_else(|| ModelError::Config("empty input sequence".into()))?;
        let m = self.size_multiple();
        let (n, _, h, w) = first.shape();
        let hid = self.config.lstm_filters;
        let mut enc_state = LstmState::zeros(n, hid, h / m, w / m);
        let mut dec_state = enc_state.clone();
        let mut outputs = Vec::with_capacity(frames.len());
        let mut caches = Vec::with_capacity(frames.len());
        for x in frames {
            check_input(x, self.config.in_channels, m)?;
            if x.shape() != first.shape() {
                return Err(NnError::Shape {
                    op: "sequence input",
                    detail: format!("frame {:?} vs first frame {:?}", x.shape(), first.shape()),
                }
                .into());
            }
            let (b, enc) = self.body.encode(x)?;
            let (next_enc, lstm_enc) = self.lstm_enc.step(&b, &enc_state)?;
            let (next_dec, lstm_dec) = self.lstm_dec.step(&next_enc.h, &dec_state)?;
            let (y, dec) = self.body.decode(next_dec.h.clone(), &enc)?;
            outputs.push(y.ensure_finite("transient network forward")?);
            caches.push(FrameCache {
                enc,
                dec,
                lstm_enc,
                lstm_dec,
            });
            enc_state = next_enc;
            dec_state = next_dec;
        }
        Ok((outputs, SequenceCache { frames: caches }))
    }

    /// Backpropagation through time for per-frame output gradients.
    pub fn backward(&mut self, cache: &SequenceCache<T>, dys: &[Tensor<T>]) -> Result<()> {
        if dys.len() != cache.frames.len() {
            return Err(NnError::Shape {
                op: "sequence backward",
                detail: format!("{} gradients for {} frames", dys.len(), cache.frames.len()),
            }
            .into());
        }
        let mut carry: Option<[Tensor<T>; 4]> = None;
        for (fc, dy) in cache.frames.iter().zip(dys).rev() {
            let (dz, dskips) = self.body.backward_decode(&fc.enc, &fc.dec, dy)?;
            let [dh_e, dc_e, dh_d, dc_d] = carry.take().unwrap_or_else(|| {
                let z = Tensor::zeros(dz.n(), dz.c(), dz.h(), dz.w());
                [z.clone(), z.clone(), z.clone(), z]
            });
            let mut dh = dz;
            dh.add_assign(&dh_d);
            let (dhe_in, dh_d_prev, dc_d_prev) = self.lstm_dec.backward_step(&fc.lstm_dec, &dh, &dc_d)?;
            let mut dhe = dhe_in;
            dhe.add_assign(&dh_e);
            let (db, dh_e_prev, dc_e_prev) = self.lstm_enc.backward_step(&fc.lstm_enc, &dhe, &dc_e)?;
            self.body.backward_encode(&fc.enc, db, &dskips)?;
            carry = Some([dh_e_prev, dc_e_prev, dh_d_prev, dc_d_prev]);
        }
        Ok(())
    }
}

impl<T: Scalar> Network<T> for TransientEdge<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.body.named_params(&mut out);
        out.push(("lstm_enc.weight".into(), &self.lstm_enc.gates.weight));
        out.push(("lstm_enc.bias".into(), &self.lstm_enc.gates.bias));
        out.push(("lstm_dec.weight".into(), &self.lstm_dec.gates.weight));
        out.push(("lstm_dec.bias".into(), &self.lstm_dec.gates.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.body.params_mut(&mut out);
        out.extend(self.lstm_enc.params_mut());
        out.extend(self.lstm_dec.params_mut());
        out
    }
}

// ---------------------------------------------------------------------------
// Either network

#[derive(Debug, Clone, PartialEq)]
pub enum EdgeNet<T> {
    Static(StaticEdge<T>),
    Transient(TransientEdge<T>),
}

impl<T: Scalar> EdgeNet<T> {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        Ok(match arch {
            Architecture::Static(c) => EdgeNet::Static(StaticEdge::build(c.clone(), seed)?),
            Architecture::Transient(c) => EdgeNet::Transient(TransientEdge::build(c.clone(), seed)?),
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            EdgeNet::Static(n) => Architecture::Static(n.config.clone()),
            EdgeNet::Transient(n) => Architecture::Transient(n.config.clone()),
        }
    }
}

impl<T: Scalar> Network<T> for EdgeNet<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            EdgeNet::Static(n) => n.named_params(),
            EdgeNet::Transient(n) => n.named_params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            EdgeNet::Static(n) => n.params_mut(),
            EdgeNet::Transient(n) => n.params_mut(),
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor conversion with normalization and padding

/// Normalizes and edge-pads one feature tensor into a `(1, C, H', W')` tensor.
pub fn input_tensor(norm: &NormStats, ft: &FeatureTensor, rec: &CropRecord) -> Result<Tensor<f32>> {
    let (c, h, w) = ft.dims();
    if c != norm.channels.len() {
        return Err(ModelError::ChannelMismatch {
            expected: norm.channels.len(),
            found: c,
        });
    }
    let (ph, pw) = rec.padded_dims(h, w);
    let mut data = Vec::with_capacity(c * ph * pw);
    for (map, &(mean, std)) in ft.channels().iter().zip(&norm.channels) {
        let plane: Vec<f32> = map.values().iter().map(|&v| ((v - mean) / std) as f32).collect();
        data.extend(pad_plane(&plane, h, w, rec));
    }
    Ok(Tensor::from_vec(1, c, ph, pw, data)?)
}

/// Normalized, edge-padded label as `(1, 1, H', W')`.
pub fn label_tensor(norm: &NormStats, label: &GridMap, rec: &CropRecord) -> Result<Tensor<f32>> {
    let (h, w) = label.dims();
    let (ph, pw) = rec.padded_dims(h, w);
    let plane: Vec<f32> = label.values().iter().map(|&v| norm.normalize_label(v) as f32).collect();
    Ok(Tensor::from_vec(1, 1, ph, pw, pad_plane(&plane, h, w, rec))?)
}

/// Crops sample `i` of a single-channel output and maps it back to physical units.
pub fn output_map(
    norm: &NormStats,
    y: &Tensor<f32>,
    sample: usize,
    rec: &CropRecord,
    pixel_size_um: f64,
    kind: GridKind,
) -> Result<GridMap> {
    let (rows, cols) = (y.h() - rec.top - rec.bottom, y.w() - rec.left - rec.right);
    let window = crop_plane(y.sample(sample), y.w(), rows, cols, rec);
    let values = window.iter().map(|&v| norm.denormalize_label(v as f64)).collect();
    Ok(GridMap::new(rows, cols, pixel_size_um, kind, values)?)
}

/// Pixelwise MSE restricted to the un-padded window of every sample; the
/// gradient is zero on padding.
pub fn window_mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, rec: &CropRecord) -> Result<(f64, Tensor<T>)> {
    if !pred.same_shape(target) || pred.c() != 1 {
        return Err(NnError::Shape {
            op: "window_mse",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        }
        .into());
    }
    let (n, _, h, w) = pred.shape();
    let (r0, r1) = (rec.top, h - rec.bottom);
    let (c0, c1) = (rec.left, w - rec.right);
    let count = (n * (r1 - r0) * (c1 - c0)) as f64;
    let scale = 2.0 / count;
    let mut grad = Tensor::zeros(n, 1, h, w);
    let mut sum = 0.0;
    for s in 0..n {
        let (p, t) = (pred.sample(s), target.sample(s));
        let g = grad.sample_mut(s);
        for r in r0..r1 {
            for c in c0..c1 {
                let i = r * w + c;
                let d = p[i].f64() - t[i].f64();
                sum += d * d;
                g[i] = T::of(scale * d);
            }
        }
    }
    Ok((sum / count, grad))
}

// ---------------------------------------------------------------------------
// Bundle: trained network plus normalization

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Static(GridMap),
    Sequence(GridSequence),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub task: Task,
    pub net: EdgeNet<f32>,
    pub norm: NormStats,
}

const MAGIC: &[u8; 7] = b"EDGEMDL";
const VERSION: u8 = b'1';

impl ModelBundle {
    pub fn new(task: Task, net: EdgeNet<f32>, norm: NormStats) -> Result<Self> {
        let arch = net.architecture();
        let expected_transient = matches!(arch, Architecture::Transient(_));
        if expected_transient != task.is_transient() {
            return Err(ModelError::Config(format!("architecture does not fit task {task}")));
        }
        if arch.in_channels() != task.input_channels() || norm.channels.len() != task.input_channels() {
            return Err(ModelError::ChannelMismatch {
                expected: task.input_channels(),
                found: arch.in_channels(),
            });
        }
        Ok(Self { task, net, norm })
    }

    pub fn architecture(&self) -> Architecture {
        self.net.architecture()
    }

    pub fn infer(&self, features: &Features) -> Result<Prediction> {
        let frames = features.frames();
        let first = frames
            .first()
            .ok_or_else(|| ModelError::Config("no feature frames".into()))?;
        let (c, h, w) = first.dims();
        if c != self.task.input_channels() {
            return Err(ModelError::ChannelMismatch {
                expected: self.task.input_channels(),
                found: c,
            });
        }
        let m = self.architecture().size_multiple();
        let rec = CropRecord::for_dims(h, w, m);
        let px = first.pixel_size_um();
        let kind = self.task.label_kind();
        match (&self.net, features) {
            (EdgeNet::Static(net), Features::Static(ft)) => {
                let y = net.forward(&input_tensor(&self.norm, ft, &rec)?)?;
                Ok(Prediction::Static(output_map(&self.norm, &y, 0, &rec, px, kind)?))
            }
            (EdgeNet::Transient(net), Features::Sequence(fts)) => {
                let xs = fts
                    .iter()
                    .map(|ft| input_tensor(&self.norm, ft, &rec))
                    .collect::<Result<Vec<_>>>()?;
                let ys = net.forward(&xs)?;
                let maps = ys
                    .iter()
                    .map(|y| output_map(&self.norm, y, 0, &rec, px, kind))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Prediction::Sequence(GridSequence::new(maps, net.config.dt_seconds)?))
            }
            _ => Err(ModelError::Config(format!(
                "features do not match the {} model",
                self.task
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let _ = writeln!(header, "task={}", self.task);
        self.architecture().header_lines(&mut header);
        for (i, (m, s)) in self.norm.channels.iter().enumerate() {
            let _ = writeln!(header, "norm.channel.{i}={m} {s}");
        }
        let _ = writeln!(header, "norm.label={} {}", self.norm.label.0, self.norm.label.1);

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(VERSION);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        let params = self.net.named_params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, p) in params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(p.shape.len() as u8);
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.value {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = *bytes.get(MAGIC.len()).ok_or(ModelError::Truncated("version"))?;
        if version != VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        if bytes.len() < MAGIC.len() + 1 + 4 {
            return Err(ModelError::Truncated("checksum"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ModelError::Checksum { stored, computed });
        }
        let mut rd = Reader {
            buf: body,
            pos: MAGIC.len() + 1,
        };
        let hlen = rd.u32("header length")? as usize;
        let header = std::str::from_utf8(rd.take(hlen, "header")?)
            .map_err(|_| ModelError::Header("header is not UTF-8".into()))?;
        let mut kv = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Header(format!("malformed line `{line}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let task: Task = header_get(&kv, "task")?.parse().map_err(ModelError::Header)?;
        let arch = Architecture::from_header(&kv)?;
        let pair = |key: &str| -> Result<(f64, f64)> {
            let v = header_get(&kv, key)?;
            let mut it = v.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok((a, b)),
                _ => header_err(format!("bad mean/std `{v}` for `{key}`")),
            }
        };
        let channels = (0..arch.in_channels())
            .map(|i| pair(&format!("norm.channel.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let norm = NormStats {
            channels,
            label: pair("norm.label")?,
        };

        let mut net = EdgeNet::<f32>::build(&arch, 0)?;
        let count = rd.u32("layer count")? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let nlen = rd.u16("layer name length")? as usize;
            let name = String::from_utf8(rd.take(nlen, "layer name")?.to_vec())
                .map_err(|_| ModelError::Header("layer name is not UTF-8".into()))?;
            let ndim = rd.u8("layer rank")? as usize;
            let shape = (0..ndim)
                .map(|_| rd.u32("layer shape").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = rd.take(len * 4, "layer data")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.insert(name, (shape, values));
        }
        if rd.pos != body.len() {
            return header_err(format!("{} trailing bytes after layers", body.len() - rd.pos));
        }
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if records.len() != names.len() {
            return header_err(format!("{} layer records, architecture has {}", records.len(), names.len()));
        }
        for (name, p) in names.iter().zip(net.params_mut()) {
            let (shape, values) = records.remove(name).ok_or_else(|| ModelError::Layer {
                name: name.clone(),
                detail: "missing".into(),
            })?;
            if shape != p.shape {
                return Err(ModelError::Layer {
                    name: name.clone(),
                    detail: format!("shape {shape:?}, expected {:?}", p.shape),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Layer {
                    name: name.clone(),
                    detail: "non-finite weight".into(),
                });
            }
            p.value = values;
        }
        Self::new(task, net, norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(ModelError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}
