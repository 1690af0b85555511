use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Layout, ModelConfig};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    AttentionBlock, Builder, Conv, Downsample, Forward, GroupNorm, Init, ParamSpec, ParamStore, ResBlock,
    TimeEmbed, Upsample,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A residual block followed by the variant's attention blocks (if any).
#[derive(Clone, Debug)]
pub struct Stage {
    pub res: ResBlock,
    pub attn: Vec<AttentionBlock>,
}

impl Stage {
    fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        config: &ModelConfig,
        c_in: usize,
        c_out: usize,
        attend: bool,
    ) -> Result<Self> {
        let v = config.variant;
        let res = ResBlock::build(&mut b.scope("res"), v.conv_kind(), c_in, c_out, config.emb_dim(), config.dropout)?;
        let mut attn = Vec::new();
        if attend {
            for (i, &mode) in v.attn_modes().iter().enumerate() {
                attn.push(AttentionBlock::build(&mut b.scope(&format!("attn{i}")), mode, c_out, config.num_heads)?);
            }
        }
        Ok(Self { res, attn })
    }

    fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, emb: Var) -> Result<Var> {
        let mut h = self.res.forward(f, x, emb)?;
        for a in &self.attn {
            h = a.forward(f, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub enum InputBlock {
    Stage(Stage),
    Down(Downsample),
}

#[derive(Clone, Debug)]
pub struct OutputBlock {
    pub stage: Stage,
    pub up: Option<Upsample>,
}

/// Encoder-middle-decoder network. Layers only hold parameter ids, so one
/// network drives any parameter store with the same table (e.g. EMA).
#[derive(Clone, Debug)]
pub struct UNet {
    pub layout: Layout,
    pub time_embed: TimeEmbed,
    pub conv_in: Conv,
    pub input_blocks: Vec<InputBlock>,
    pub middle: (Stage, Stage),
    pub output_blocks: Vec<OutputBlock>,
    /// `skips[j]` is the encoder activation concatenated into output block
    /// `j`: 0 is `conv_in`, `i + 1` is input block `i`.
    pub skips: Vec<usize>,
    pub out_norm: GroupNorm,
    pub out_conv: Conv,
}

impl UNet {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let kind = config.variant.conv_kind();
        let io_channels = config.layout().channels();
        let emb_dim = config.emb_dim();
        let levels = config.levels();

        let time_embed = TimeEmbed::build(&mut b.scope("time_embed"), c, emb_dim)?;
        let conv_in = Conv::build(&mut b.scope("conv_in"), io_channels, c, kind.kernel(), [1, 1, 1], Init::FanIn)?;

        // Channel width of every activation pushed for the decoder.
        let mut pushed = vec![c];
        let mut ch = c;
        let mut input_blocks = Vec::new();
        for level in 0..levels {
            let out = config.level_channels(level);
            for _ in 0..config.num_res_blocks {
                let mut sb = b.scope(&format!("input.{}", input_blocks.len()));
                input_blocks.push(InputBlock::Stage(Stage::build(&mut sb, config, ch, out, config.attends_at(level))?));
                ch = out;
                pushed.push(ch);
            }
            if level + 1 < levels {
                let mut sb = b.scope(&format!("input.{}.down", input_blocks.len()));
                input_blocks.push(InputBlock::Down(Downsample::build(&mut sb, kind, ch)?));
                pushed.push(ch);
            }
        }

        let middle = (
            Stage::build(&mut b.scope("middle.0"), config, ch, ch, true)?,
            Stage::build(&mut b.scope("middle.1"), config, ch, ch, false)?,
        );

        let mut output_blocks = Vec::new();
        let mut skips = Vec::new();
        let mut pending: Vec<usize> = (0..pushed.len()).collect();
        for level in (0..levels).rev() {
            let out = config.level_channels(level);
            for i in 0..=config.num_res_blocks {
                let src = pending.pop().expect("one skip per output block");
                let prefix = format!("output.{}", output_blocks.len());
                let mut sb = b.scope(&prefix);
                let stage = Stage::build(&mut sb, config, ch + pushed[src], out, config.attends_at(level))?;
                ch = out;
                let up = if level > 0 && i == config.num_res_blocks {
                    Some(Upsample::build(&mut sb.scope("up"), kind, ch)?)
                } else {
                    None
                };
                skips.push(src);
                output_blocks.push(OutputBlock { stage, up });
            }
        }
        debug_assert!(pending.is_empty());

        let out_norm = GroupNorm::build(&mut b.scope("out.norm"), ch)?;
        let out_conv = Conv::build(&mut b.scope("out.conv"), ch, io_channels, kind.kernel(), [1, 1, 1], Init::Zero)?;

        Ok(Self {
            layout: config.layout(),
            time_embed,
            conv_in,
            input_blocks,
            middle,
            output_blocks,
            skips,
            out_norm,
            out_conv,
        })
    }

    /// Predicts the noise in `x` (in the configured layout) at timesteps `ts`.
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var, ts: &[usize]) -> Result<Var> {
        let shape = f.graph.shape(x).to_vec();
        let batch = shape.first().copied().unwrap_or(0);
        if ts.len() != batch {
            return Err(Error::invalid("unet", format!("{} timesteps for batch {batch}", ts.len())));
        }
        let x5 = match self.layout {
            Layout::Wavelet => x,
            Layout::Concat | Layout::Pixel => {
                if shape.len() != 4 {
                    return Err(Error::invalid("unet", format!("expected a 4D batch, got {shape:?}")));
                }
                f.graph.reshape(x, &[shape[0], shape[1], 1, shape[2], shape[3]])?
            }
        };
        let s5 = f.graph.shape(x5).to_vec();
        if s5.len() != 5 || s5[1] != self.layout.channels() {
            return Err(Error::invalid("unet", format!("input {shape:?} does not match layout {:?}", self.layout)));
        }

        let emb = self.time_embed.forward(f, ts)?;
        let mut h = self.conv_in.forward(f, x5)?;
        let mut acts = vec![h];
        for block in &self.input_blocks {
            h = match block {
                InputBlock::Stage(s) => s.forward(f, h, emb)?,
                InputBlock::Down(d) => d.forward(f, h)?,
            };
            acts.push(h);
        }
        h = self.middle.0.forward(f, h, emb)?;
        h = self.middle.1.forward(f, h, emb)?;
        for (block, &src) in self.output_blocks.iter().zip(&self.skips) {
            h = f.graph.concat(&[h, acts[src]], 1)?;
            h = block.stage.forward(f, h, emb)?;
            if let Some(up) = &block.up {
                h = up.forward(f, h)?;
            }
        }
        h = self.out_norm.forward(f, h)?;
        h = f.graph.silu(h);
        h = self.out_conv.forward(f, h)?;
        if self.layout == Layout::Wavelet {
            Ok(h)
        } else {
            f.graph.reshape(h, &shape)
        }
    }
}

impl ModelConfig {
    /// The parameter table (names and shapes, in order) without allocating it.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let mut specs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::<f32, _>::dry(&mut specs, &mut rng);
        UNet::build(&mut b, self)?;
        Ok(specs)
    }

    /// Exact number of scalar parameters of the built model.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.param_specs()?.iter().map(ParamSpec::numel).sum())
    }
}

/// Parameter counts grouped by the first `depth` components of each dotted
/// name, in first-appearance order.
pub fn group_counts<'a>(named: impl IntoIterator<Item = (&'a str, usize)>, depth: usize) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, n) in named {
        let key = name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, total)) => *total += n,
            None => groups.push((key, n)),
        }
    }
    groups
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    net: UNet,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = UNet::build(&mut Builder::new(&mut params, &mut rng), &config)?;
        Ok(Self { config, net, params })
    }

    /// Wraps existing parameters, checking they match the config's table.
    pub fn with_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let specs = config.param_specs()?;
        check_table(&specs, &params)?;
        let mut scratch = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::build(&mut Builder::<T, _>::dry(&mut scratch, &mut rng), &config)?;
        Ok(Self { config, net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn param_breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        group_counts(self.params.iter().map(|(n, t)| (n, t.numel())), depth)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Eval-mode noise prediction with this model's parameters.
    pub fn predict(&self, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        self.predict_with(&self.params, x, ts)
    }

    /// Eval-mode noise prediction with substitute parameters (e.g. EMA).
    pub fn predict_with(&self, params: &ParamStore<T>, x: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter table has {} entries, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        let mut f = Forward::eval(params);
        let xv = f.graph.constant(x.clone());
        let y = self.net.forward(&mut f, xv, ts)?;
        Ok(f.graph.value(y).clone())
    }
}

fn check_table<T: Scalar>(specs: &[ParamSpec], params: &ParamStore<T>) -> Result<()> {
    let mut errs = Vec::new();
    if specs.len() != params.len() {
        errs.push(format!("expected {} parameters, found {}", specs.len(), params.len()));
    }
    for (spec, (name, t)) in specs.iter().zip(params.iter()) {
        if spec.name != name || spec.shape != t.shape() {
            errs.push(format!("expected {} {:?}, found {name} {:?}", spec.name, spec.shape, t.shape()));
        }
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}
