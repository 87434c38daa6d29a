//! Network assembly: a spectral-compression stem, four stages of
//! convolutional or relational blocks with stride-2 downsampling at each
//! stage entry (cumulative rates 2, 4, 8, 16), and a global-average-pooling
//! classification head.
//!
//! Block structure: pre-normalization (per-channel standardization with
//! learned scale/shift), depthwise aggregation (static conv kernel or
//! relational window), a pointwise channel mix, a smooth-ramp activation,
//! and a residual connection.

use std::collections::HashMap;

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{
    channel_norm, conv3d_depthwise, conv3d_pointwise, global_avg_pool, relconv3d,
    relconv3d_inspect, silu, Conv3dSpec, Padding, RelConvProj, RelConvSpec, WeightMode,
};
use crate::tensor::{elem, Element, Tape, Tensor, ValueId};

/// Aggregation flavor of a block or downsampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Conv,
    Rc,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// Aggregation window, odd in each extent.
    pub kernel: [usize; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    /// Operator of the stride-2 entry downsampling.
    pub downsample: BlockKind,
    pub blocks: Vec<BlockConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StemConfig {
    pub out_channels: usize,
    /// Spectral-compression kernel, odd in each extent.
    pub kernel: [usize; 3],
    pub spectral_stride: usize,
}

/// Options of the relational operator shared by every rc layer.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RcOptions {
    pub weight_mode: WeightMode,
    /// When false, raw features serve as query, key, and value.
    pub use_projections: bool,
}

impl Default for RcOptions {
    fn default() -> Self {
        RcOptions { weight_mode: WeightMode::PerChannel, use_projections: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Input patch extent (odd).
    pub patch_size: usize,
    /// Spectral bands of the input patch.
    pub bands: usize,
    pub num_classes: usize,
    pub stem: StemConfig,
    /// Exactly four stages.
    pub stages: Vec<StageConfig>,
    pub rc: RcOptions,
}

const BLOCK_KERNEL: [usize; 3] = [3, 3, 3];

impl NetworkConfig {
    /// Default layout: 16-channel stem, stage widths doubling from 32,
    /// conv blocks in stages 1-2 ([1, 2] blocks), rc blocks in stages 3-4
    /// ([2, 2] blocks), stride-2 downsampling at every stage entry.
    pub fn default_full(patch_size: usize, bands: usize, num_classes: usize) -> Self {
        Self::with_widths(patch_size, bands, num_classes, 16, [32, 64, 128, 256])
    }

    /// Desk-scale variant with halved widths.
    pub fn reduced(patch_size: usize, bands: usize, num_classes: usize) -> Self {
        Self::with_widths(patch_size, bands, num_classes, 16, [16, 32, 64, 128])
    }

    pub fn with_widths(
        patch_size: usize,
        bands: usize,
        num_classes: usize,
        stem_channels: usize,
        widths: [usize; 4],
    ) -> Self {
        let block = |kind| BlockConfig { kind, kernel: BLOCK_KERNEL };
        let stage = |ch, kind, n: usize| StageConfig {
            out_channels: ch,
            downsample: kind,
            blocks: (0..n).map(|_| block(kind)).collect(),
        };
        NetworkConfig {
            patch_size,
            bands,
            num_classes,
            stem: StemConfig { out_channels: stem_channels, kernel: [3, 3, 7], spectral_stride: 2 },
            stages: vec![
                stage(widths[0], BlockKind::Conv, 1),
                stage(widths[1], BlockKind::Conv, 2),
                stage(widths[2], BlockKind::Rc, 2),
                stage(widths[3], BlockKind::Rc, 2),
            ],
            rc: RcOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "patch size must be odd and positive, got {}",
                self.patch_size
            )));
        }
        if self.bands == 0 {
            return Err(Error::InvalidArg("band count must be >= 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArg("class count must be >= 1".into()));
        }
        if self.stages.len() != 4 {
            return Err(Error::InvalidArg(format!(
                "exactly 4 stages required, got {}",
                self.stages.len()
            )));
        }
        if self.stem.out_channels == 0 || self.stem.spectral_stride == 0 {
            return Err(Error::InvalidArg("degenerate stem".into()));
        }
        for &k in &self.stem.kernel {
            if k % 2 == 0 {
                return Err(Error::InvalidArg(format!(
                    "stem kernel extents must be odd, got {:?}",
                    self.stem.kernel
                )));
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.out_channels == 0 {
                return Err(Error::InvalidArg(format!("stage {} has zero channels", i + 1)));
            }
            let mut kinds: Vec<BlockKind> = vec![stage.downsample];
            for block in &stage.blocks {
                for &k in &block.kernel {
                    if k % 2 == 0 {
                        return Err(Error::InvalidArg(format!(
                            "block kernel extents must be odd, got {:?}",
                            block.kernel
                        )));
                    }
                }
                kinds.push(block.kind);
            }
            if let WeightMode::Shared { heads } = self.rc.weight_mode {
                let stage_in = if i == 0 { self.stem.out_channels } else { self.stages[i - 1].out_channels };
                for (j, kind) in kinds.iter().enumerate() {
                    let ch = if j == 0 { stage_in } else { stage.out_channels };
                    if *kind == BlockKind::Rc && (heads == 0 || ch % heads != 0) {
                        return Err(Error::InvalidArg(format!(
                            "heads {heads} must divide channels {ch} in stage {}",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Feature-map extents through the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub stem_in: [usize; 3],
    pub stem_out: [usize; 3],
    /// Extents after each stage's downsampling (where its blocks run).
    pub stage_dims: [[usize; 3]; 4],
}

fn ceil_div3(d: [usize; 3], s: [usize; 3]) -> [usize; 3] {
    [d[0].div_ceil(s[0]), d[1].div_ceil(s[1]), d[2].div_ceil(s[2])]
}

impl Layout {
    fn of(cfg: &NetworkConfig) -> Result<Self> {
        let stem_in = [cfg.patch_size, cfg.patch_size, cfg.bands];
        let stem_out = ceil_div3(stem_in, [1, 1, cfg.stem.spectral_stride]);
        if stem_out.iter().any(|&d| d < 2) {
            return Err(Error::InvalidArg(format!(
                "patch too small for the downsampling schedule: stem output {stem_out:?} \
                 needs every extent >= 2"
            )));
        }
        let mut stage_dims = [[0usize; 3]; 4];
        let mut dims = stem_out;
        for sd in stage_dims.iter_mut() {
            dims = ceil_div3(dims, [2, 2, 2]);
            *sd = dims;
        }
        Ok(Layout { stem_in, stem_out, stage_dims })
    }
}

/// Named parameter collection in stable checkpoint order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Element> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.names.iter().zip(self.tensors.iter())
    }
}

/// A built network: validated config, layout, and initialized parameters.
pub struct Network<T: Element = f32> {
    cfg: NetworkConfig,
    layout: Layout,
    params: ParamStore<T>,
}

/// Builds a network with deterministic parameter initialization: static
/// kernels draw magnitude-preserving uniform values, relational projections
/// start at identity, residual channel mixes start at zero.
pub fn build_network<T: Element>(cfg: &NetworkConfig, seed: u64) -> Result<Network<T>> {
    cfg.validate()?;
    let layout = Layout::of(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();

    let mut uniform = |shape: &[usize], bound: f64| -> Tensor<T> {
        let len: usize = shape.iter().product();
        let data: Vec<T> = (0..len).map(|_| elem(rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).expect("sized")
    };
    let identity = |c: usize| -> Tensor<T> {
        let mut w = vec![T::zero(); c * c];
        for i in 0..c {
            w[i * c + i] = T::one();
        }
        Tensor::from_vec(&[c, c], w).expect("square")
    };
    let consts = |shape: &[usize], v: f64| Tensor::<T>::new(shape, crate::tensor::Fill::Const(v)).expect("shape");

    let kernel_bound = |taps: usize| (3.0 / taps as f64).sqrt();
    let mix_bound = |fan_in: usize| (6.0 / fan_in as f64).sqrt();

    // Stem: the single input channel expands to `out_channels`, each with
    // its own spectral-compression kernel.
    let sk = cfg.stem.kernel;
    let stem_shape = [sk[0], sk[1], sk[2], cfg.stem.out_channels];
    let taps = sk[0] * sk[1] * sk[2];
    params.push("stem.kernel".into(), uniform(&stem_shape, kernel_bound(taps)));

    let mut in_ch = cfg.stem.out_channels;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let sname = format!("stage{}", si + 1);
        let out_ch = stage.out_channels;
        match stage.downsample {
            BlockKind::Conv => {
                let shape = [BLOCK_KERNEL[0], BLOCK_KERNEL[1], BLOCK_KERNEL[2], in_ch];
                params.push(format!("{sname}.down.kernel"), uniform(&shape, kernel_bound(27)));
            }
            BlockKind::Rc => {
                if cfg.rc.use_projections {
                    params.push(format!("{sname}.down.wq"), identity(in_ch));
                    params.push(format!("{sname}.down.wk"), identity(in_ch));
                    params.push(format!("{sname}.down.wv"), identity(in_ch));
                }
            }
        }
        params.push(format!("{sname}.down.mix.weight"), uniform(&[in_ch, out_ch], mix_bound(in_ch)));
        params.push(format!("{sname}.down.mix.bias"), consts(&[out_ch], 0.0));

        for (bi, block) in stage.blocks.iter().enumerate() {
            let bname = format!("{sname}.block{}", bi + 1);
            params.push(format!("{bname}.norm.scale"), consts(&[out_ch], 1.0));
            params.push(format!("{bname}.norm.shift"), consts(&[out_ch], 0.0));
            match block.kind {
                BlockKind::Conv => {
                    let k = block.kernel;
                    let taps = k[0] * k[1] * k[2];
                    let shape = [k[0], k[1], k[2], out_ch];
                    params.push(format!("{bname}.kernel"), uniform(&shape, kernel_bound(taps)));
                }
                BlockKind::Rc => {
                    if cfg.rc.use_projections {
                        params.push(format!("{bname}.wq"), identity(out_ch));
                        params.push(format!("{bname}.wk"), identity(out_ch));
                        params.push(format!("{bname}.wv"), identity(out_ch));
                    }
                }
            }
            params.push(format!("{bname}.mix.weight"), consts(&[out_ch, out_ch], 0.0));
            params.push(format!("{bname}.mix.bias"), consts(&[out_ch], 0.0));
        }
        in_ch = out_ch;
    }
    params.push("head.weight".into(), uniform(&[in_ch, cfg.num_classes], mix_bound(in_ch)));
    params.push("head.bias".into(), consts(&[cfg.num_classes], 0.0));

    Ok(Network { cfg: cfg.clone(), layout, params })
}

impl<T: Element> Network<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> u64 {
        self.params.tensors().iter().map(|t| t.len() as u64).sum()
    }

    /// Registers every parameter on a tape, in store order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<ValueId> {
        self.params.tensors().iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Differentiable single-sample forward; `input` is an `[s, s, L, 1]`
    /// tape value and the result is the `[K]` logits id.
    pub fn forward_sample(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[ValueId],
        input: ValueId,
    ) -> Result<ValueId> {
        self.forward_inner(tape, param_ids, input, None).map(|(logits, _)| logits)
    }

    fn pid(&self, param_ids: &[ValueId], name: &str) -> Result<ValueId> {
        self.params
            .index_of(name)
            .map(|i| param_ids[i])
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter '{name}'")))
    }

    fn rc_proj(
        &self,
        param_ids: &[ValueId],
        prefix: &str,
    ) -> Result<Option<RelConvProj>> {
        if !self.cfg.rc.use_projections {
            return Ok(None);
        }
        Ok(Some(RelConvProj {
            wq: self.pid(param_ids, &format!("{prefix}.wq"))?,
            wk: self.pid(param_ids, &format!("{prefix}.wk"))?,
            wv: self.pid(param_ids, &format!("{prefix}.wv"))?,
        }))
    }

    fn rc_spec(&self, window: [usize; 3], stride: [usize; 3]) -> RelConvSpec {
        RelConvSpec {
            window,
            stride,
            padding: Padding::Same,
            weight_mode: self.cfg.rc.weight_mode,
        }
    }

    /// Runs the forward plan; when `capture` names an aggregation layer,
    /// also returns the id of that layer's input feature map.
    fn forward_inner(
        &self,
        tape: &mut Tape<T>,
        param_ids: &[ValueId],
        input: ValueId,
        capture: Option<&str>,
    ) -> Result<(ValueId, Option<ValueId>)> {
        let in_shape = tape.value(input).shape().to_vec();
        let want = [self.cfg.patch_size, self.cfg.patch_size, self.cfg.bands, 1];
        if in_shape != want {
            return Err(Error::ShapeMismatch(format!(
                "sample must be {want:?}, got {in_shape:?}"
            )));
        }
        let mut captured = None;
        let mut remember = |name: &str, id: ValueId| {
            if capture == Some(name) {
                captured = Some(id);
            }
        };

        let mut x = tape.expand_channels(input, self.cfg.stem.out_channels)?;
        remember("stem", x);
        let stem_spec = Conv3dSpec {
            stride: [1, 1, self.cfg.stem.spectral_stride],
            padding: Padding::Same,
        };
        x = conv3d_depthwise(tape, x, self.pid(param_ids, "stem.kernel")?, &stem_spec)?;

        for (si, stage) in self.cfg.stages.iter().enumerate() {
            let sname = format!("stage{}", si + 1);
            let dname = format!("{sname}.down");
            remember(&dname, x);
            x = match stage.downsample {
                BlockKind::Conv => {
                    let spec = Conv3dSpec { stride: [2, 2, 2], padding: Padding::Same };
                    conv3d_depthwise(tape, x, self.pid(param_ids, &format!("{dname}.kernel"))?, &spec)?
                }
                BlockKind::Rc => {
                    let proj = self.rc_proj(param_ids, &dname)?;
                    let spec = self.rc_spec(BLOCK_KERNEL, [2, 2, 2]);
                    relconv3d(tape, x, proj.as_ref(), &spec)?
                }
            };
            x = conv3d_pointwise(
                tape,
                x,
                self.pid(param_ids, &format!("{dname}.mix.weight"))?,
                self.pid(param_ids, &format!("{dname}.mix.bias"))?,
            )?;
            x = silu(tape, x);

            for (bi, block) in stage.blocks.iter().enumerate() {
                let bname = format!("{sname}.block{}", bi + 1);
                let mut h = channel_norm(
                    tape,
                    x,
                    self.pid(param_ids, &format!("{bname}.norm.scale"))?,
                    self.pid(param_ids, &format!("{bname}.norm.shift"))?,
                )?;
                remember(&bname, h);
                h = match block.kind {
                    BlockKind::Conv => {
                        let spec = Conv3dSpec { stride: [1, 1, 1], padding: Padding::Same };
                        conv3d_depthwise(tape, h, self.pid(param_ids, &format!("{bname}.kernel"))?, &spec)?
                    }
                    BlockKind::Rc => {
                        let proj = self.rc_proj(param_ids, &bname)?;
                        let spec = self.rc_spec(block.kernel, [1, 1, 1]);
                        relconv3d(tape, h, proj.as_ref(), &spec)?
                    }
                };
                h = conv3d_pointwise(
                    tape,
                    h,
                    self.pid(param_ids, &format!("{bname}.mix.weight"))?,
                    self.pid(param_ids, &format!("{bname}.mix.bias"))?,
                )?;
                h = silu(tape, h);
                x = tape.add(x, h)?;
            }
        }

        let pooled = global_avg_pool(tape, x)?;
        let logits = conv3d_pointwise(
            tape,
            pooled,
            self.pid(param_ids, "head.weight")?,
            self.pid(param_ids, "head.bias")?,
        )?;
        Ok((logits, captured))
    }

    /// Forward over a batch `[B, s, s, L]`, yielding logits `[B, K]`.
    /// Samples are independent; each runs on its own throwaway tape.
    pub fn forward_batch(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = batch.shape();
        if shape.len() != 4
            || shape[1] != self.cfg.patch_size
            || shape[2] != self.cfg.patch_size
            || shape[3] != self.cfg.bands
        {
            return Err(Error::ShapeMismatch(format!(
                "batch must be [B, {0}, {0}, {1}], got {shape:?}",
                self.cfg.patch_size, self.cfg.bands
            )));
        }
        let b = shape[0];
        let sample_len = shape[1] * shape[2] * shape[3];
        let k = self.cfg.num_classes;
        let mut logits = Vec::with_capacity(b * k);
        for i in 0..b {
            let data = batch.data()[i * sample_len..(i + 1) * sample_len].to_vec();
            let sample = Tensor::from_vec(
                &[self.cfg.patch_size, self.cfg.patch_size, self.cfg.bands, 1],
                data,
            )?;
            let mut tape = Tape::new();
            let pids = self.register(&mut tape);
            let input = tape.leaf(sample);
            let out = self.forward_sample(&mut tape, &pids, input)?;
            logits.extend_from_slice(tape.value(out).data());
        }
        Tensor::from_vec(&[b, k], logits)
    }

    // ── Checkpoint state ────────────────────────────────────────────────

    /// Parameters as `(name, f32 tensor)` pairs in checkpoint order.
    pub fn state(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|(name, t)| {
                let data: Vec<f32> =
                    t.data().iter().map(|&v| v.to_f64().unwrap_or(f64::NAN) as f32).collect();
                (name.clone(), Tensor::from_vec(t.shape(), data).expect("same shape"))
            })
            .collect()
    }

    /// Restores parameters from checkpoint entries; every parameter must be
    /// present with a matching shape.
    pub fn load_state(&mut self, entries: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f32>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if entries.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} tensors, network wants {}",
                entries.len(),
                self.params.len()
            )));
        }
        let mut fresh = Vec::with_capacity(self.params.len());
        for (name, current) in self.params.iter() {
            let loaded = by_name.get(name.as_str()).ok_or_else(|| {
                Error::ConfigMismatch(format!("checkpoint missing parameter '{name}'"))
            })?;
            if loaded.shape() != current.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter '{name}': checkpoint shape {:?} vs network shape {:?}",
                    loaded.shape(),
                    current.shape()
                )));
            }
            let data: Vec<T> = loaded.data().iter().map(|&v| elem(v as f64)).collect();
            fresh.push(Tensor::from_vec(current.shape(), data)?);
        }
        for (slot, t) in self.params.tensors_mut().iter_mut().zip(fresh) {
            *slot = t;
        }
        Ok(())
    }

    // ── Complexity accounting ───────────────────────────────────────────

    /// Lowers the network to its per-layer MAC accounting plan.
    pub fn plan(&self) -> Vec<PlannedLayer> {
        let mut plan = Vec::new();
        let locs = |d: [usize; 3]| (d[0] * d[1] * d[2]) as u64;
        let l = &self.layout;
        let sk = self.cfg.stem.kernel;
        plan.push(PlannedLayer {
            name: "stem".into(),
            kind: PlannedKind::ConvAgg,
            out_locations: locs(l.stem_out),
            in_locations: locs(l.stem_in),
            taps: (sk[0] * sk[1] * sk[2]) as u64,
            in_channels: self.cfg.stem.out_channels as u64,
            out_channels: self.cfg.stem.out_channels as u64,
        });
        let mut in_ch = self.cfg.stem.out_channels as u64;
        let mut in_dims = l.stem_out;
        for (si, stage) in self.cfg.stages.iter().enumerate() {
            let sname = format!("stage{}", si + 1);
            let out_dims = l.stage_dims[si];
            let out_ch = stage.out_channels as u64;
            plan.push(PlannedLayer {
                name: format!("{sname}.down"),
                kind: agg_kind(stage.downsample, self.cfg.rc.use_projections),
                out_locations: locs(out_dims),
                in_locations: locs(in_dims),
                taps: 27,
                in_channels: in_ch,
                out_channels: in_ch,
            });
            plan.push(PlannedLayer {
                name: format!("{sname}.down.mix"),
                kind: PlannedKind::Pointwise,
                out_locations: locs(out_dims),
                in_locations: locs(out_dims),
                taps: 0,
                in_channels: in_ch,
                out_channels: out_ch,
            });
            for (bi, block) in stage.blocks.iter().enumerate() {
                let bname = format!("{sname}.block{}", bi + 1);
                plan.push(PlannedLayer {
                    name: format!("{bname}.norm"),
                    kind: PlannedKind::Norm,
                    out_locations: locs(out_dims),
                    in_locations: locs(out_dims),
                    taps: 0,
                    in_channels: out_ch,
                    out_channels: out_ch,
                });
                plan.push(PlannedLayer {
                    name: bname.clone(),
                    kind: agg_kind(block.kind, self.cfg.rc.use_projections),
                    out_locations: locs(out_dims),
                    in_locations: locs(out_dims),
                    taps: (block.kernel[0] * block.kernel[1] * block.kernel[2]) as u64,
                    in_channels: out_ch,
                    out_channels: out_ch,
                });
                plan.push(PlannedLayer {
                    name: format!("{bname}.mix"),
                    kind: PlannedKind::Pointwise,
                    out_locations: locs(out_dims),
                    in_locations: locs(out_dims),
                    taps: 0,
                    in_channels: out_ch,
                    out_channels: out_ch,
                });
            }
            in_ch = out_ch;
            in_dims = out_dims;
        }
        plan.push(PlannedLayer {
            name: "head".into(),
            kind: PlannedKind::Pointwise,
            out_locations: 1,
            in_locations: 1,
            taps: 0,
            in_channels: in_ch,
            out_channels: self.cfg.num_classes as u64,
        });
        plan
    }

    /// Aggregation-term MAC total (the operator-table formulas applied
    /// layer by layer). Pointwise, normalization, and projection costs are
    /// reported separately by [`Self::macs_report`].
    pub fn macs_estimate(&self) -> BigUint {
        macs_of_plan(&self.plan()).table_total
    }

    pub fn macs_report(&self) -> MacsReport {
        macs_of_plan(&self.plan())
    }

    // ── Kernel inspection ───────────────────────────────────────────────

    /// Dumps the effective window weights of an aggregation layer at two
    /// output positions, for one channel. Conv kernels are static, so both
    /// rows are identical by construction; rc weights depend on the local
    /// window contents and sum to one.
    pub fn kernel_dump(
        &self,
        patch: &Tensor<T>,
        layer: &str,
        positions: [[usize; 3]; 2],
        channel: usize,
    ) -> Result<KernelDump> {
        let desc = self.describe_layer(layer)?;
        if channel >= desc.channels {
            return Err(Error::InvalidArg(format!(
                "channel {channel} out of range for {} channels",
                desc.channels
            )));
        }
        for pos in &positions {
            for a in 0..3 {
                if pos[a] >= desc.out_dims[a] {
                    return Err(Error::InvalidArg(format!(
                        "position {pos:?} outside layer output extents {:?}",
                        desc.out_dims
                    )));
                }
            }
        }

        match desc.kind {
            BlockKind::Conv => {
                let kernel = self
                    .params
                    .by_name(&desc.kernel_param)
                    .ok_or_else(|| Error::InvalidArg(format!("unknown layer '{layer}'")))?;
                let [kh, kw, ks] = desc.window;
                let mut row = Vec::with_capacity(kh * kw * ks);
                for t in 0..kh * kw * ks {
                    row.push(kernel.data()[t * desc.channels + channel].to_f64().unwrap());
                }
                Ok(KernelDump {
                    layer: layer.to_string(),
                    kind: BlockKind::Conv,
                    window: desc.window,
                    positions,
                    channel,
                    rows: [row.clone(), row],
                })
            }
            BlockKind::Rc => {
                if patch.shape() != [self.cfg.patch_size, self.cfg.patch_size, self.cfg.bands] {
                    return Err(Error::ShapeMismatch(format!(
                        "patch must be [{0}, {0}, {1}], got {2:?}",
                        self.cfg.patch_size,
                        self.cfg.bands,
                        patch.shape()
                    )));
                }
                let mut tape = Tape::new();
                let pids = self.register(&mut tape);
                let sample = patch.reshaped(&[
                    self.cfg.patch_size,
                    self.cfg.patch_size,
                    self.cfg.bands,
                    1,
                ])?;
                let input = tape.leaf(sample);
                let (_, captured) = self.forward_inner(&mut tape, &pids, input, Some(layer))?;
                let feat_id = captured.ok_or_else(|| {
                    Error::InvalidArg(format!("layer '{layer}' was not reached in the forward plan"))
                })?;
                let feat = tape.value(feat_id);
                let proj = if self.cfg.rc.use_projections {
                    Some((
                        self.params.by_name(&format!("{layer}.wq")).expect("built"),
                        self.params.by_name(&format!("{layer}.wk")).expect("built"),
                        self.params.by_name(&format!("{layer}.wv")).expect("built"),
                    ))
                } else {
                    None
                };
                let spec = self.rc_spec(desc.window, desc.stride);
                let inspect = relconv3d_inspect(feat, proj, &spec)?;
                let group = channel / (desc.channels / inspect.groups);
                let rows = positions.map(|pos| {
                    let loc = (pos[0] * desc.out_dims[1] + pos[1]) * desc.out_dims[2] + pos[2];
                    inspect
                        .weights_at(loc, group)
                        .iter()
                        .map(|w| w.to_f64().unwrap())
                        .collect::<Vec<f64>>()
                });
                Ok(KernelDump {
                    layer: layer.to_string(),
                    kind: BlockKind::Rc,
                    window: desc.window,
                    positions,
                    channel,
                    rows,
                })
            }
        }
    }

    fn describe_layer(&self, layer: &str) -> Result<LayerDesc> {
        if layer == "stem" {
            return Ok(LayerDesc {
                kind: BlockKind::Conv,
                window: self.cfg.stem.kernel,
                stride: [1, 1, self.cfg.stem.spectral_stride],
                channels: self.cfg.stem.out_channels,
                out_dims: self.layout.stem_out,
                kernel_param: "stem.kernel".into(),
            });
        }
        for (si, stage) in self.cfg.stages.iter().enumerate() {
            let sname = format!("stage{}", si + 1);
            let in_ch = if si == 0 {
                self.cfg.stem.out_channels
            } else {
                self.cfg.stages[si - 1].out_channels
            };
            if layer == format!("{sname}.down") {
                return Ok(LayerDesc {
                    kind: stage.downsample,
                    window: BLOCK_KERNEL,
                    stride: [2, 2, 2],
                    channels: in_ch,
                    out_dims: self.layout.stage_dims[si],
                    kernel_param: format!("{sname}.down.kernel"),
                });
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let bname = format!("{sname}.block{}", bi + 1);
                if layer == bname {
                    return Ok(LayerDesc {
                        kind: block.kind,
                        window: block.kernel,
                        stride: [1, 1, 1],
                        channels: stage.out_channels,
                        out_dims: self.layout.stage_dims[si],
                        kernel_param: format!("{bname}.kernel"),
                    });
                }
            }
        }
        Err(Error::InvalidArg(format!(
            "unknown layer id '{layer}'; expected 'stem', 'stageN.down', or 'stageN.blockM'"
        )))
    }
}

struct LayerDesc {
    kind: BlockKind,
    window: [usize; 3],
    stride: [usize; 3],
    channels: usize,
    out_dims: [usize; 3],
    kernel_param: String,
}

/// Effective window weights of one layer at two output positions.
#[derive(Clone, Debug, Serialize)]
pub struct KernelDump {
    pub layer: String,
    pub kind: BlockKind,
    pub window: [usize; 3],
    pub positions: [[usize; 3]; 2],
    pub channel: usize,
    pub rows: [Vec<f64>; 2],
}

impl KernelDump {
    /// CSV rows: `kind,pos_h,pos_w,pos_s,channel,w0,...`.
    pub fn to_csv(&self) -> String {
        let taps = self.window[0] * self.window[1] * self.window[2];
        let mut out = String::from("kind,pos_h,pos_w,pos_s,channel");
        for t in 0..taps {
            out.push_str(&format!(",w{t}"));
        }
        out.push('\n');
        let kind = match self.kind {
            BlockKind::Conv => "conv",
            BlockKind::Rc => "rc",
        };
        for (pos, row) in self.positions.iter().zip(&self.rows) {
            out.push_str(&format!("{kind},{},{},{},{}", pos[0], pos[1], pos[2], self.channel));
            for w in row {
                out.push_str(&format!(",{w}"));
            }
            out.push('\n');
        }
        out
    }
}

// ── MAC accounting over lowered plans ───────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlannedKind {
    ConvAgg,
    RcAgg { projected: bool },
    Pointwise,
    Norm,
}

fn agg_kind(kind: BlockKind, projected: bool) -> PlannedKind {
    match kind {
        BlockKind::Conv => PlannedKind::ConvAgg,
        BlockKind::Rc => PlannedKind::RcAgg { projected },
    }
}

/// One accounting row of the lowered network.
#[derive(Clone, Debug)]
pub struct PlannedLayer {
    pub name: String,
    pub kind: PlannedKind,
    pub out_locations: u64,
    /// Input locations, used for projection accounting of rc layers.
    pub in_locations: u64,
    /// Kernel taps of aggregation layers (`k^3` for cubic windows).
    pub taps: u64,
    pub in_channels: u64,
    pub out_channels: u64,
}

#[derive(Clone, Debug)]
pub struct LayerMacs {
    pub name: String,
    /// Aggregation term per the operator table.
    pub table: BigUint,
    /// Everything else: pointwise mixes, projections, normalization.
    pub beyond: BigUint,
}

#[derive(Clone, Debug)]
pub struct MacsReport {
    pub layers: Vec<LayerMacs>,
    pub table_total: BigUint,
    pub beyond_total: BigUint,
}

/// Applies the per-operator MAC formulas to a lowered plan.
///
/// Table terms: `N_out * taps * C` per conv aggregation and twice that per
/// rc aggregation. Beyond-table terms: `N * C_in * C_out` per pointwise mix,
/// `(2 N_in + N_out) * C^2` per projected rc layer (key/value maps over the
/// input plus queries at the centers), and `2 N C` per normalization.
pub fn macs_of_plan(plan: &[PlannedLayer]) -> MacsReport {
    let big = BigUint::from;
    let mut layers = Vec::with_capacity(plan.len());
    let mut table_total = BigUint::ZERO;
    let mut beyond_total = BigUint::ZERO;
    for l in plan {
        let (table, beyond) = match l.kind {
            PlannedKind::ConvAgg => {
                (big(l.out_locations) * big(l.taps) * big(l.in_channels), BigUint::ZERO)
            }
            PlannedKind::RcAgg { projected } => {
                let table = big(2u64) * big(l.out_locations) * big(l.taps) * big(l.in_channels);
                let beyond = if projected {
                    (big(2u64) * big(l.in_locations) + big(l.out_locations))
                        * big(l.in_channels)
                        * big(l.in_channels)
                } else {
                    BigUint::ZERO
                };
                (table, beyond)
            }
            PlannedKind::Pointwise => (
                BigUint::ZERO,
                big(l.out_locations) * big(l.in_channels) * big(l.out_channels),
            ),
            PlannedKind::Norm => {
                (BigUint::ZERO, big(2u64) * big(l.out_locations) * big(l.in_channels))
            }
        };
        table_total += &table;
        beyond_total += &beyond;
        layers.push(LayerMacs { name: l.name.clone(), table, beyond });
    }
    MacsReport { layers, table_total, beyond_total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn tiny_cfg() -> NetworkConfig {
        NetworkConfig::with_widths(5, 8, 3, 4, [4, 4, 6, 6])
    }

    #[test]
    fn default_layout_dims() {
        let cfg = NetworkConfig::default_full(27, 200, 16);
        let net = build_network::<f32>(&cfg, 1).unwrap();
        let l = net.layout();
        assert_eq!(l.stem_out, [27, 27, 100]);
        assert_eq!(l.stage_dims[0], [14, 14, 50]);
        assert_eq!(l.stage_dims[1], [7, 7, 25]);
        assert_eq!(l.stage_dims[2], [4, 4, 13]);
        assert_eq!(l.stage_dims[3], [2, 2, 7]);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut cfg = tiny_cfg();
        cfg.stages[0].blocks[0].kernel = [2, 3, 3];
        assert!(build_network::<f32>(&cfg, 1).is_err());
    }

    #[test]
    fn too_small_patch_rejected() {
        let cfg = NetworkConfig::with_widths(1, 8, 2, 4, [4, 4, 4, 4]);
        assert!(matches!(build_network::<f32>(&cfg, 1), Err(Error::InvalidArg(_))));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = tiny_cfg();
        let a = build_network::<f32>(&cfg, 7).unwrap();
        let b = build_network::<f32>(&cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                ta.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                tb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let c = build_network::<f32>(&cfg, 8).unwrap();
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data());
        assert!(differs);
    }

    #[test]
    fn zero_input_yields_finite_logits() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 3).unwrap();
        let batch = Tensor::zeros(&[1, 5, 5, 8]).unwrap();
        let logits = net.forward_batch(&batch).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 3).unwrap();
        let a = Tensor::<f32>::new(&[5, 5, 8], Fill::Uniform { seed: 1, lo: -1.0, hi: 1.0 })
            .unwrap();
        let b = Tensor::<f32>::new(&[5, 5, 8], Fill::Uniform { seed: 2, lo: -1.0, hi: 1.0 })
            .unwrap();
        let mut fwd = a.data().to_vec();
        fwd.extend_from_slice(b.data());
        let mut rev = b.data().to_vec();
        rev.extend_from_slice(a.data());
        let out_fwd = net.forward_batch(&Tensor::from_vec(&[2, 5, 5, 8], fwd).unwrap()).unwrap();
        let out_rev = net.forward_batch(&Tensor::from_vec(&[2, 5, 5, 8], rev).unwrap()).unwrap();
        assert_eq!(out_fwd.data()[..3], out_rev.data()[3..]);
        assert_eq!(out_fwd.data()[3..], out_rev.data()[..3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 11).unwrap();
        let x = Tensor::<f32>::new(&[1, 5, 5, 8], Fill::Uniform { seed: 4, lo: -1.0, hi: 1.0 })
            .unwrap();
        let a = net.forward_batch(&x).unwrap();
        let b = net.forward_batch(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_conv_plan_macs() {
        // A lone depthwise 3x3x3 conv on 8x8x8x4: 8*8*8*27*4 = 55,296.
        let plan = vec![PlannedLayer {
            name: "conv".into(),
            kind: PlannedKind::ConvAgg,
            out_locations: 512,
            in_locations: 512,
            taps: 27,
            in_channels: 4,
            out_channels: 4,
        }];
        let report = macs_of_plan(&plan);
        assert_eq!(report.table_total, BigUint::from(55_296u64));
        assert_eq!(
            report.table_total,
            crate::complexity::macs_conv(crate::complexity::OpDims::new(8, 8, 8, 4).unwrap())
        );
        // Same dims as an rc aggregation: exactly twice.
        let plan_rc = vec![PlannedLayer {
            kind: PlannedKind::RcAgg { projected: false },
            ..plan[0].clone()
        }];
        assert_eq!(macs_of_plan(&plan_rc).table_total, BigUint::from(110_592u64));
    }

    #[test]
    fn empty_plan_is_zero() {
        let report = macs_of_plan(&[]);
        assert_eq!(report.table_total, BigUint::ZERO);
        assert_eq!(report.beyond_total, BigUint::ZERO);
    }

    #[test]
    fn swapping_last_block_to_rc_changes_accounting_predictably() {
        let cfg = tiny_cfg();
        let base = build_network::<f32>(&cfg, 5).unwrap();
        for stage in 0..4 {
            let mut swapped_cfg = cfg.clone();
            let last = swapped_cfg.stages[stage].blocks.len() - 1;
            let was = swapped_cfg.stages[stage].blocks[last].kind;
            if was == BlockKind::Rc {
                continue;
            }
            swapped_cfg.stages[stage].blocks[last].kind = BlockKind::Rc;
            let swapped = build_network::<f32>(&swapped_cfg, 5).unwrap();

            // Aggregation MACs of that block double: delta == one conv term.
            let dims = base.layout().stage_dims[stage];
            let c = cfg.stages[stage].out_channels as u64;
            let n = (dims[0] * dims[1] * dims[2]) as u64;
            let delta = swapped.macs_estimate() - base.macs_estimate();
            assert_eq!(delta, BigUint::from(n * 27 * c));

            // Parameters: three C x C projections appear, the static kernel
            // goes away.
            let got = swapped.param_count() as i64 - base.param_count() as i64;
            assert_eq!(got, 3 * (c * c) as i64 - 27 * c as i64);
        }
    }

    #[test]
    fn state_roundtrip_and_mismatch() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 13).unwrap();
        let state = net.state();
        let mut other = build_network::<f32>(&cfg, 14).unwrap();
        other.load_state(&state).unwrap();
        for ((_, a), (_, b)) in net.params.iter().zip(other.params.iter()) {
            assert_eq!(a.data(), b.data());
        }
        // Different class count: head shape differs.
        let mut wrong = build_network::<f32>(&NetworkConfig::with_widths(5, 8, 4, 4, [4, 4, 6, 6]), 1)
            .unwrap();
        assert!(matches!(wrong.load_state(&state), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn unknown_layer_rejected() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 1).unwrap();
        let patch = Tensor::zeros(&[5, 5, 8]).unwrap();
        assert!(net.kernel_dump(&patch, "stage9.down", [[0; 3], [0; 3]], 0).is_err());
    }

    #[test]
    fn conv_kernel_dump_is_position_independent() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 21).unwrap();
        let patch =
            Tensor::<f32>::new(&[5, 5, 8], Fill::Uniform { seed: 3, lo: -1.0, hi: 1.0 }).unwrap();
        let dump = net
            .kernel_dump(&patch, "stage1.block1", [[0, 0, 0], [1, 2, 1]], 2)
            .unwrap();
        assert_eq!(dump.kind, BlockKind::Conv);
        assert_eq!(dump.rows[0], dump.rows[1]);
        assert_eq!(dump.rows[0].len(), 27);
    }

    #[test]
    fn rc_kernel_dump_rows_normalized_and_position_dependent() {
        let cfg = tiny_cfg();
        let net = build_network::<f32>(&cfg, 23).unwrap();
        let patch =
            Tensor::<f32>::new(&[5, 5, 8], Fill::Uniform { seed: 5, lo: -1.0, hi: 1.0 }).unwrap();
        let dump = net
            .kernel_dump(&patch, "stage3.block1", [[0, 0, 0], [1, 1, 0]], 1)
            .unwrap();
        assert_eq!(dump.kind, BlockKind::Rc);
        for row in &dump.rows {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&w| w > 0.0));
        }
        assert_ne!(dump.rows[0], dump.rows[1]);
        let csv = dump.to_csv();
        assert!(csv.starts_with("kind,pos_h,pos_w,pos_s,channel,w0,"));
        assert_eq!(csv.trim().lines().count(), 3);
    }
}
