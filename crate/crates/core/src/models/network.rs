use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, Modality, ModelConfig};
use super::layers::{Builder, Conv, ConvBnRelu, ConvPath, SpatialAttention};
use super::params::{Ctx, Mode, ParamStore};
use super::{fuse_scores, predict_score};
use crate::autograd::Var;
use crate::cdc::CdcSpec;
use crate::error::{shape_err, Error, Result};
use crate::losses::{overall_loss, CdlKernelBank, LossReport};
use crate::ops::ResizeMode;
use crate::tensor::{Scalar, Tensor};

/// Per-modality input batches, each `[N,3,S,S]` with values in `[0,1]`.
pub type Inputs<T> = BTreeMap<Modality, Tensor<T>>;

/// Attention kernel sizes for the low, mid and high levels.
pub const ATTENTION_KERNELS: [usize; 3] = [7, 5, 3];

/// Features tapped after each level cell's pool, at 1/2, 1/4 and 1/8 of the
/// input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelFeatures {
    pub low: Var,
    pub mid: Var,
    pub high: Var,
}

impl LevelFeatures {
    pub fn levels(&self) -> [Var; 3] {
        [self.low, self.mid, self.high]
    }
}

pub const LEVEL_NAMES: [&str; 3] = ["low", "mid", "high"];

#[derive(Clone, Debug)]
struct Cell {
    expand: ConvBnRelu,
    reduce: ConvBnRelu,
}

/// Stem plus three `CDC(C→rC) → CDC(rC→C) → maxpool` level cells.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBnRelu,
    cells: Vec<Cell>,
}

impl Backbone {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c_in: usize, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.init_channels;
        let hidden = cfg.hidden_channels()?;
        let stem = b.conv_bn_relu(&format!("{name}.stem"), c_in, c, cfg.theta)?;
        let cells = LEVEL_NAMES
            .iter()
            .map(|level| {
                Ok(Cell {
                    expand: b.conv_bn_relu(&format!("{name}.{level}.expand"), c, hidden, cfg.theta)?,
                    reduce: b.conv_bn_relu(&format!("{name}.{level}.reduce"), hidden, c, cfg.theta)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { stem, cells })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<LevelFeatures> {
        let mut h = self.stem.forward(ctx, x)?;
        let mut taps = Vec::with_capacity(3);
        for cell in &self.cells {
            h = cell.expand.forward(ctx, h)?;
            h = cell.reduce.forward(ctx, h)?;
            h = ctx.tape.maxpool2d(h, 2, 2)?;
            taps.push(h);
        }
        Ok(LevelFeatures { low: taps[0], mid: taps[1], high: taps[2] })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        std::iter::once(&mut self.stem.conv)
            .chain(self.cells.iter_mut().flat_map(|c| [&mut c.expand.conv, &mut c.reduce.conv]))
    }
}

/// Per-level spatial attention applied before the levels are merged.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    levels: Vec<SpatialAttention>,
}

impl AttentionModule {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str) -> Self {
        let levels = LEVEL_NAMES
            .iter()
            .zip(ATTENTION_KERNELS)
            .map(|(level, k)| SpatialAttention::build(b, &format!("{name}.attention.{level}"), k))
            .collect();
        Self { levels }
    }

    pub fn level(&self, i: usize) -> &SpatialAttention {
        &self.levels[i]
    }

    pub fn refine<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, f: LevelFeatures) -> Result<LevelFeatures> {
        Ok(LevelFeatures {
            low: self.levels[0].forward(ctx, f.low)?,
            mid: self.levels[1].forward(ctx, f.mid)?,
            high: self.levels[2].forward(ctx, f.high)?,
        })
    }
}

/// `CDC(in→C) → norm → relu → CDC(C→1) → sigmoid`.
#[derive(Clone, Debug)]
pub struct Head {
    hidden: ConvBnRelu,
    out: Conv,
}

impl Head {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c_in: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            hidden: b.conv_bn_relu(&format!("{name}.hidden"), c_in, cfg.init_channels, cfg.theta)?,
            out: b.conv(&format!("{name}.out"), cfg.init_channels, 1, 3, true, CdcSpec::same(cfg.theta, 3)?),
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, x)?;
        let logits = self.out.forward(ctx, h)?;
        Ok(ctx.tape.sigmoid(logits))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        [&mut self.hidden.conv, &mut self.out].into_iter()
    }
}

fn merge_levels<T: Scalar>(ctx: &mut Ctx<'_, T>, features: &[LevelFeatures], size: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(features.len() * 3);
    for f in features {
        for v in f.levels() {
            parts.push(ctx.tape.resize(v, size, size, ResizeMode::Bilinear)?);
        }
    }
    ctx.tape.concat_channels(&parts)
}

/// Single backbone network. With one input modality this is the
/// single-modal network; with several it is input-level fusion over their
/// channel concatenation.
#[derive(Clone, Debug)]
pub struct Cdcn {
    name: String,
    inputs: Vec<Modality>,
    backbone: Backbone,
    attention: Option<AttentionModule>,
    head: Head,
}

impl Cdcn {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, inputs: Vec<Modality>, cfg: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::build(b, name, 3 * inputs.len(), cfg)?;
        let attention = cfg.attention.then(|| AttentionModule::build(b, name));
        let head = Head::build(b, &format!("{name}.head"), 3 * cfg.init_channels, cfg)?;
        Ok(Self { name: name.to_string(), inputs, backbone, attention, head })
    }

    pub fn attention(&self) -> Option<&AttentionModule> {
        self.attention.as_ref()
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, inputs: &BTreeMap<Modality, Var>, size: usize) -> Result<(Var, LevelFeatures)> {
        let xs: Vec<Var> = self.inputs.iter().map(|m| inputs[m]).collect();
        let x = if xs.len() == 1 { xs[0] } else { ctx.tape.concat_channels(&xs)? };
        let mut f = self.backbone.forward(ctx, x)?;
        if let Some(att) = &self.attention {
            f = att.refine(ctx, f)?;
        }
        let merged = merge_levels(ctx, &[f], size)?;
        Ok((self.head.forward(ctx, merged)?, f))
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv> {
        self.backbone.convs_mut().chain(self.head.convs_mut())
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Single(Cdcn),
    FeatureFusion { branches: Vec<(Modality, Backbone)>, head: Head },
    ScoreFusion { nets: Vec<Cdcn>, weights: Vec<f64> },
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Predicted masks `[N,1,S/8,S/8]`; one per branch for score fusion,
    /// otherwise exactly one.
    pub masks: Vec<Var>,
    /// Level features per branch, labelled by modality (or `input` for a
    /// channel-concatenated backbone).
    pub features: Vec<(String, LevelFeatures)>,
}

/// A network together with its configuration and parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    cfg: ModelConfig,
    net: Network,
    store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the layer plan for `cfg` with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let net = if !cfg.is_multi_modal() {
            let m = cfg.modalities[0];
            Network::Single(Cdcn::build(&mut b, m.as_str(), vec![m], &cfg)?)
        } else {
            match cfg.fusion {
                Fusion::Input => Network::Single(Cdcn::build(&mut b, "input", cfg.modalities.clone(), &cfg)?),
                Fusion::Feature => {
                    let branches = cfg
                        .modalities
                        .iter()
                        .map(|&m| Ok((m, Backbone::build(&mut b, m.as_str(), 3, &cfg)?)))
                        .collect::<Result<Vec<_>>>()?;
                    let c_in = 3 * cfg.init_channels * branches.len();
                    let head = Head::build(&mut b, "head", c_in, &cfg)?;
                    Network::FeatureFusion { branches, head }
                }
                Fusion::Score => Network::ScoreFusion {
                    nets: cfg
                        .modalities
                        .iter()
                        .map(|&m| Cdcn::build(&mut b, m.as_str(), vec![m], &cfg))
                        .collect::<Result<_>>()?,
                    weights: cfg.score_weights.clone(),
                },
            }
        };
        Ok(Self { cfg, net, store })
    }

    /// Rebuilds the layer plan for `cfg` and installs `params`, which must
    /// match it name-for-name and shape-for-shape.
    pub fn from_parts(cfg: ModelConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::new(cfg, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this configuration, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for (name, t) in params {
            model.store.set(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), net: self.net.clone(), store: self.store.cast() }
    }

    /// Switches how every CDC layer is evaluated. Parameters are untouched.
    pub fn set_conv_path(&mut self, path: ConvPath) {
        let convs: Vec<&mut Conv> = match &mut self.net {
            Network::Single(n) => n.convs_mut().collect(),
            Network::FeatureFusion { branches, head } => {
                branches.iter_mut().flat_map(|(_, b)| b.convs_mut()).chain(head.convs_mut()).collect()
            }
            Network::ScoreFusion { nets, .. } => nets.iter_mut().flat_map(|n| n.convs_mut()).collect(),
        };
        for c in convs {
            c.path = path;
        }
    }

    /// Checks the inputs and returns the batch size.
    pub fn check_inputs(&self, inputs: &Inputs<T>) -> Result<usize> {
        let s = self.cfg.input_size;
        let mut batch = None;
        for m in &self.cfg.modalities {
            let x = inputs
                .get(m)
                .ok_or_else(|| Error::InvalidArgument(format!("missing {m} input required by this model")))?;
            let (n, c, h, w) = x.dims4()?;
            if c != 3 {
                return Err(shape_err!("{m} input must have 3 channels, got {c}"));
            }
            if (h, w) != (s, s) {
                return Err(shape_err!("{m} input is {h}x{w}, model expects {s}x{s}"));
            }
            if *batch.get_or_insert(n) != n {
                return Err(shape_err!("modalities disagree on batch size"));
            }
        }
        Ok(batch.unwrap_or(0))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, inputs: &Inputs<T>) -> Result<ForwardOutput> {
        self.check_inputs(inputs)?;
        let size = self.cfg.mask_size();
        let vars: BTreeMap<Modality, Var> = self
            .cfg
            .modalities
            .iter()
            .map(|&m| (m, ctx.tape.constant(inputs[&m].clone())))
            .collect();
        match &self.net {
            Network::Single(net) => {
                let (mask, f) = net.forward(ctx, &vars, size)?;
                let label = if net.inputs.len() == 1 { net.inputs[0].to_string() } else { net.name.clone() };
                Ok(ForwardOutput { masks: vec![mask], features: vec![(label, f)] })
            }
            Network::FeatureFusion { branches, head } => {
                let mut features = Vec::with_capacity(branches.len());
                for (m, backbone) in branches {
                    features.push((m.to_string(), backbone.forward(ctx, vars[m])?));
                }
                let levels: Vec<LevelFeatures> = features.iter().map(|(_, f)| *f).collect();
                let merged = merge_levels(ctx, &levels, size)?;
                Ok(ForwardOutput { masks: vec![head.forward(ctx, merged)?], features })
            }
            Network::ScoreFusion { nets, .. } => {
                let mut out = ForwardOutput { masks: Vec::new(), features: Vec::new() };
                for net in nets {
                    let (mask, f) = net.forward(ctx, &vars, size)?;
                    out.masks.push(mask);
                    out.features.push((net.inputs[0].to_string(), f));
                }
                Ok(out)
            }
        }
    }

    /// Sum of `mse + cdl` over every predicted mask against `gt` (`[N,1,h,w]`).
    pub fn loss(&self, ctx: &mut Ctx<'_, T>, out: &ForwardOutput, gt: &Tensor<T>) -> Result<(Var, LossReport)> {
        let bank = CdlKernelBank::standard();
        let gt = ctx.tape.constant(gt.clone());
        let mut total: Option<Var> = None;
        let mut report = LossReport::default();
        for &mask in &out.masks {
            let (l, r) = overall_loss(&mut ctx.tape, mask, gt, &bank)?;
            report.mse += r.mse;
            report.cdl += r.cdl;
            report.overall += r.overall;
            total = Some(match total {
                Some(t) => ctx.tape.add(t, l)?,
                None => l,
            });
        }
        Ok((total.expect("at least one mask"), report))
    }

    /// Eval-mode predicted masks, one `[N,1,h,w]` tensor per output branch.
    pub fn predict_masks(&self, inputs: &Inputs<T>) -> Result<Vec<Tensor<T>>> {
        let mut ctx = Ctx::new(&self.store, Mode::Eval, false);
        let out = self.forward(&mut ctx, inputs)?;
        Ok(out.masks.iter().map(|&m| ctx.tape.value(m).clone()).collect())
    }

    /// Combines per-branch masks of one sample into its liveness score.
    pub fn score_from_masks(&self, masks: &[Tensor<T>]) -> Result<f64> {
        match &self.net {
            Network::ScoreFusion { nets, weights } => {
                let scores: BTreeMap<Modality, f64> =
                    nets.iter().zip(masks).map(|(n, m)| (n.inputs[0], predict_score(m))).collect();
                let w: BTreeMap<Modality, f64> = nets.iter().zip(weights).map(|(n, &w)| (n.inputs[0], w)).collect();
                fuse_scores(&scores, &w)
            }
            _ => Ok(predict_score(&masks[0])),
        }
    }

    /// Eval-mode liveness score per sample (mean of the predicted mask,
    /// fused across branches for score-level fusion).
    pub fn predict_scores(&self, inputs: &Inputs<T>) -> Result<Vec<f64>> {
        let masks = self.predict_masks(inputs)?;
        let n = masks[0].shape()[0];
        (0..n)
            .map(|i| {
                let per: Vec<Tensor<T>> = masks.iter().map(|m| m.index_first(i)).collect::<Result<_>>()?;
                self.score_from_masks(&per)
            })
            .collect()
    }
}
