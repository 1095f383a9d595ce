//! Model variants: assembly, forward pass, parameter / MAC accounting and
//! checkpoints.

mod checkpoint;
mod spec;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use spec::{interleave, BlockKind, ModelSpec};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::blocks::{BatchNorm, DownsampleLayer, FfnBlock, MdmBlock, Stem, INIT_STD};
use crate::error::{Error, Result};
use crate::init;
use crate::params::{Ctx, EntryKind, Mode, ParamStore};
use crate::scan::GridShape;
use crate::ssm::ScanKernel;
use crate::tensor::{dims, Scalar, Tensor};

#[derive(Clone, Debug)]
pub enum Block {
    Ffn(FfnBlock),
    Mdm(MdmBlock),
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Ffn(_) => BlockKind::Ffn,
            Block::Mdm(_) => BlockKind::Mdm,
        }
    }

    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Block::Ffn(b) => b.forward(ctx, x),
            Block::Mdm(b) => b.forward(ctx, x),
        }
    }

    fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            Block::Ffn(b) => b.macs(h, w),
            Block::Mdm(b) => b.macs(h, w),
        }
    }
}

/// One resolution level: optional downsample, then the block sequence
/// wrapped by an entry and an exit batch norm.
#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<DownsampleLayer>,
    pub entry_bn: BatchNorm,
    pub blocks: Vec<Block>,
    pub exit_bn: BatchNorm,
}

impl Stage {
    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'t, '_, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        if let Some(d) = &self.downsample {
            x = d.forward(ctx, x)?;
        }
        x = self.entry_bn.forward(ctx, x)?;
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        self.exit_bn.forward(ctx, x)
    }
}

/// Result of one forward pass.
pub struct ForwardOutput<'t, T> {
    /// `[B, num_classes]`
    pub logits: Var<'t, T>,
    /// Output of each of the four stages.
    pub stage_features: Vec<Var<'t, T>>,
    /// New batch-norm running statistics (train mode only); apply with
    /// [`Model::apply_stat_updates`].
    pub stat_updates: Vec<(String, Tensor<T>)>,
}

/// Parameter counts grouped by top-level module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
    /// Batch-norm running statistics, not included in `total`.
    pub running_stats: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacReport {
    pub resolution: usize,
    pub rows: Vec<(String, u64)>,
    pub total: u64,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    store: ParamStore<T>,
    stem: Stem,
    stages: Vec<Stage>,
    pub scan_kernel: ScanKernel,
}

const MODULES: [&str; 6] = ["stem", "stage1", "stage2", "stage3", "stage4", "head"];

fn module_of(name: &str) -> &'static str {
    if name.starts_with("stem.") {
        return MODULES[0];
    }
    if let Some(rest) = name.strip_prefix("stages.") {
        match rest.as_bytes().first() {
            Some(b'0') => return MODULES[1],
            Some(b'1') => return MODULES[2],
            Some(b'2') => return MODULES[3],
            Some(b'3') => return MODULES[4],
            _ => {}
        }
    }
    MODULES[5]
}

impl<T: Scalar> Model<T> {
    /// Builds and deterministically initializes a model.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = spec.channels;
        let stem = Stem::new(&mut store, "stem", c[0], &mut rng);
        let side = spec.final_grid();
        let pos_grid = GridShape::new(side, side)?;
        let mut stages = Vec::with_capacity(4);
        for (i, kinds) in spec.stage_blocks.iter().enumerate() {
            let p = format!("stages.{i}");
            let downsample = (i > 0)
                .then(|| DownsampleLayer::new(&mut store, &format!("{p}.downsample"), c[i - 1], c[i], &mut rng));
            let entry_bn = BatchNorm::new(format!("{p}.entry_bn"), c[i]);
            entry_bn.register(&mut store);
            let blocks = kinds
                .iter()
                .enumerate()
                .map(|(j, k)| {
                    let bp = format!("{p}.blocks.{j}");
                    match k {
                        BlockKind::Ffn => Block::Ffn(FfnBlock::new(&mut store, &bp, c[i], &mut rng)),
                        BlockKind::Mdm => Block::Mdm(MdmBlock::new(&mut store, &bp, c[i], pos_grid, &mut rng)),
                    }
                })
                .collect();
            let exit_bn = BatchNorm::new(format!("{p}.exit_bn"), c[i]);
            exit_bn.register(&mut store);
            stages.push(Stage {
                downsample,
                entry_bn,
                blocks,
                exit_bn,
            });
        }
        store.insert(
            "head.weight",
            init::trunc_normal(&[spec.num_classes, c[3]], INIT_STD, &mut rng),
            EntryKind::Param,
        );
        store.insert("head.bias", Tensor::zeros(&[spec.num_classes]), EntryKind::Param);
        Ok(Self {
            spec,
            store,
            stem,
            stages,
            scan_kernel: ScanKernel::default(),
        })
    }

    /// Rebuilds a model around existing tensors; the table must contain
    /// exactly the names, kinds and shapes `spec` requires.
    pub fn from_store(spec: ModelSpec, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::build(spec, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for (name, entry) in model.store.iter() {
            let got = store.get(name)?;
            if got.shape() != entry.value.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    entry.value.shape()
                )));
            }
            if store.kind(name) != Some(entry.kind) {
                return Err(Error::Format(format!("tensor `{name}` has the wrong kind")));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Same architecture with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            scan_kernel: self.scan_kernel,
        }
    }

    /// Runs the network on `[B, 3, H, W]` images (H and W divisible by 32).
    /// With `track_grads` every parameter becomes a gradient-tracking leaf.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        images: &Tensor<T>,
        mode: Mode,
        track_grads: bool,
    ) -> Result<ForwardOutput<'t, T>> {
        let [_, c, h, w] = dims::<4>("forward", images.shape())?;
        if c != 3 {
            return Err(Error::invalid("forward", format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "forward",
                format!("input {h}x{w} must have height and width divisible by 32"),
            ));
        }
        let mut ctx = Ctx::new(tape, &self.store, mode, track_grads);
        ctx.scan_kernel = self.scan_kernel;
        let (logits, stage_features) = self.forward_ctx(&ctx, tape.constant(images.clone()))?;
        Ok(ForwardOutput {
            logits,
            stage_features,
            stat_updates: ctx.into_stat_updates(),
        })
    }

    /// Forward pass through a caller-provided context; returns the logits and
    /// the four stage outputs.
    #[allow(clippy::type_complexity)]
    pub fn forward_ctx<'t>(
        &self,
        ctx: &Ctx<'t, '_, T>,
        images: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<Var<'t, T>>)> {
        let mut x = self.stem.forward(ctx, images)?;
        let mut stage_features = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(ctx, x)?;
            stage_features.push(x);
        }
        let pooled = x.global_avg_pool()?;
        let logits = pooled.linear(ctx.param("head.weight")?, Some(ctx.param("head.bias")?))?;
        Ok((logits, stage_features))
    }

    /// Eval-mode logits without gradient tracking.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, images, Mode::Eval, false)?;
        Ok((*out.logits.value()).clone())
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            self.store.set(&name, value)?;
        }
        Ok(())
    }

    pub fn count_params(&self) -> ParamReport {
        let mut rows: Vec<(String, usize)> = MODULES.iter().map(|m| (m.to_string(), 0)).collect();
        let mut running_stats = 0;
        for (name, entry) in self.store.iter() {
            match entry.kind {
                EntryKind::Param => {
                    let i = MODULES.iter().position(|m| *m == module_of(name)).expect("known module");
                    rows[i].1 += entry.value.numel();
                }
                EntryKind::Buffer => running_stats += entry.value.numel(),
            }
        }
        let total = rows.iter().map(|r| r.1).sum();
        ParamReport {
            rows,
            total,
            running_stats,
        }
    }

    /// Analytic multiply-accumulate count for one `resolution x resolution`
    /// image (formulas in [`crate::blocks`]).
    pub fn count_macs(&self, resolution: usize) -> Result<MacReport> {
        if resolution == 0 || resolution % 32 != 0 {
            return Err(Error::invalid(
                "count_macs",
                format!("resolution {resolution} must be a positive multiple of 32"),
            ));
        }
        let mut rows = vec![("stem".to_string(), self.stem.macs(resolution, resolution))];
        let mut side = resolution / 4;
        for (i, stage) in self.stages.iter().enumerate() {
            let mut m = 0;
            if let Some(d) = &stage.downsample {
                m += d.macs(side, side);
                side = d.conv.out_extent(side);
            }
            m += stage.blocks.iter().map(|b| b.macs(side, side)).sum::<u64>();
            rows.push((format!("stage{}", i + 1), m));
        }
        rows.push((
            "head".to_string(),
            (self.spec.channels[3] * self.spec.num_classes) as u64,
        ));
        let total = rows.iter().map(|r| r.1).sum();
        Ok(MacReport {
            resolution,
            rows,
            total,
        })
    }
}

pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model<f32>> {
    Model::build(spec, seed)
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> ParamReport {
    model.count_params()
}

pub fn count_macs<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<MacReport> {
    model.count_macs(resolution)
}
