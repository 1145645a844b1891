use rand::Rng;

use super::config::{ModelConfig, Variant};
use super::count::{count_params, LayerDims, ParamCount};
use super::windows::split_windows;
use crate::error::{Error, Result};
use crate::substrate::param::{glorot_uniform, lstm_bias, lstm_uniform};
use crate::substrate::seed::{fork, SeededRng, Stream};
use crate::substrate::{ConvSpec, Graph, NodeId, ParamSet, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct LstmIdx {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum ContextLayout {
    Recurrent { l1: [LstmIdx; 2], l2: [LstmIdx; 2] },
    Dense(ConvIdx),
}

#[derive(Clone, Debug)]
struct Layout {
    /// Per stream: input conv followed by three inner convs.
    streams: Option<[[ConvIdx; 4]; 2]>,
    context: ContextLayout,
    inter_head: ConvIdx,
    refine: Option<[ConvIdx; 3]>,
}

/// Window-level and dense class distributions for one cycle, both `[T × C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPrediction {
    pub intermediate: Tensor,
    /// Absent for [`Variant::A3`].
    pub final_: Option<Tensor>,
}

impl DualPrediction {
    /// The head used for decoding: final when present, otherwise intermediate.
    pub fn decoding(&self) -> &Tensor {
        self.final_.as_ref().unwrap_or(&self.intermediate)
    }
}

/// Graph nodes produced by [`PrecTime::build`].
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[N × D_F]`
    pub flat: NodeId,
    /// `[N × C_u × L_u]`
    pub unflat: NodeId,
    /// `[N × D_ctx]`
    pub context: NodeId,
    /// `[T × C]`
    pub intermediate: NodeId,
    /// `[T × C]`
    pub final_: Option<NodeId>,
}

/// The segmentation network.
#[derive(Clone, Debug)]
pub struct PrecTime {
    config: ModelConfig,
    variant: Variant,
    params: ParamSet,
    layout: Layout,
}

impl PrecTime {
    /// Builds a randomly initialised full network.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_variant(config, Variant::Full, seed)
    }

    /// Builds a randomly initialised network of the given variant.
    pub fn with_variant(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = fork(seed, Stream::Init);
        let mut params = ParamSet::new();
        let k = config.cnn_kernel;
        let ch = config.cnn_channels;
        let dims = LayerDims::from_config(&config, variant);

        let add_conv = |params: &mut ParamSet, name: &str, c_in: usize, c_out: usize, rng: &mut SeededRng| {
            let w = glorot_uniform(&[c_out, c_in, k], c_in * k, c_out * k, rng);
            Ok::<_, Error>(ConvIdx {
                weight: params.add(format!("{name}.weight"), w)?,
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            })
        };
        let add_dense = |params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng| {
            let w = glorot_uniform(&[d_in, d_out], d_in, d_out, rng);
            Ok::<_, Error>(ConvIdx {
                weight: params.add(format!("{name}.weight"), w)?,
                bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
            })
        };
        let add_lstm = |params: &mut ParamSet, name: &str, d_in: usize, h: usize, rng: &mut SeededRng| {
            Ok::<_, Error>(LstmIdx {
                w_ih: params.add(format!("{name}.w_ih"), lstm_uniform(&[d_in, 4 * h], h, rng))?,
                w_hh: params.add(format!("{name}.w_hh"), lstm_uniform(&[h, 4 * h], h, rng))?,
                bias: params.add(format!("{name}.bias"), lstm_bias(h))?,
            })
        };

        let streams = if variant.has_feature_extractor() {
            let mut make = |s: &str| -> Result<[ConvIdx; 4]> {
                Ok([
                    add_conv(&mut params, &format!("fe.{s}.conv0"), config.sensors, ch, &mut rng)?,
                    add_conv(&mut params, &format!("fe.{s}.conv1"), ch, ch, &mut rng)?,
                    add_conv(&mut params, &format!("fe.{s}.conv2"), ch, ch, &mut rng)?,
                    add_conv(&mut params, &format!("fe.{s}.conv3"), ch, ch, &mut rng)?,
                ])
            };
            Some([make("a")?, make("b")?])
        } else {
            None
        };

        let ctx_width = config.context_width();
        let context = if variant.has_recurrent_context() {
            let (h1, h2) = (config.lstm1_hidden, config.lstm2_hidden);
            ContextLayout::Recurrent {
                l1: [
                    add_lstm(&mut params, "ctx.l1.fwd", dims.flat_features, h1, &mut rng)?,
                    add_lstm(&mut params, "ctx.l1.bwd", dims.flat_features, h1, &mut rng)?,
                ],
                l2: [
                    add_lstm(&mut params, "ctx.l2.fwd", 2 * h1, h2, &mut rng)?,
                    add_lstm(&mut params, "ctx.l2.bwd", 2 * h1, h2, &mut rng)?,
                ],
            }
        } else {
            ContextLayout::Dense(add_dense(&mut params, "ctx.dense", dims.flat_features, ctx_width, &mut rng)?)
        };

        let inter_head = add_dense(&mut params, "head.inter", ctx_width, config.num_classes, &mut rng)?;

        let refine = if variant.has_refinement() {
            let rc = config.refine_channels;
            Some([
                add_conv(&mut params, "refine.conv0", dims.refine_input, rc, &mut rng)?,
                add_conv(&mut params, "refine.conv1", rc, rc, &mut rng)?,
                add_dense(&mut params, "head.final", rc, config.num_classes, &mut rng)?,
            ])
        } else {
            None
        };

        Ok(Self {
            config,
            variant,
            params,
            layout: Layout {
                streams,
                context,
                inter_head,
                refine,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layer_dims(&self) -> LayerDims {
        LayerDims::from_config(&self.config, self.variant)
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.layer_dims(), self.variant)
    }

    /// Adds every parameter to `g` as a borrowed leaf, in parameter order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(&p.value)).collect()
    }

    fn check_windows(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        match *shape {
            [n, s, l] if n >= 1 && s == c.sensors && l == c.window_length => Ok(()),
            _ => Err(Error::shape(format!(
                "windows must be [N×{}×{}], got {shape:?}",
                c.sensors, c.window_length
            ))),
        }
    }

    /// Per-window encoder: returns `(flat [N×D_F], unflat [N×C_u×L_u])`.
    pub fn feature_extract<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        p: &[NodeId],
        windows: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<(NodeId, NodeId)> {
        self.check_windows(g.value(windows).shape())?;
        let n = g.value(windows).shape()[0];
        let c = &self.config;
        let Some(streams) = &self.layout.streams else {
            let flat = g.reshape(windows, &[n, c.sensors * c.window_length])?;
            return Ok((flat, windows));
        };
        let mut pooled = Vec::with_capacity(2);
        for (convs, dilation) in streams.iter().zip([c.dilation_low, c.dilation_high]) {
            let spec = ConvSpec::same(dilation);
            let first = &convs[0];
            let mut x = g.conv1d(windows, p[first.weight], p[first.bias], spec)?;
            x = g.relu(x);
            x = g.dropout(x, c.dropout, rng, training)?;
            x = g.maxpool1d(x, c.pool)?;
            for conv in &convs[1..] {
                x = g.conv1d(x, p[conv.weight], p[conv.bias], spec)?;
                x = g.relu(x);
            }
            pooled.push(x);
        }
        let unflat = g.concat(&pooled, 1)?;
        let width = g.value(unflat).numel() / n;
        let flat = g.reshape(unflat, &[n, width])?;
        Ok((flat, unflat))
    }

    /// Inter-window context `[N × D_ctx]` from the flat features.
    pub fn context_detect(&self, g: &mut Graph<'_>, p: &[NodeId], flat: NodeId) -> Result<NodeId> {
        let expected = self.layer_dims().flat_features;
        let shape = g.value(flat).shape();
        if shape.len() != 2 || shape[1] != expected {
            return Err(Error::shape(format!(
                "context input must be [N×{expected}], got {shape:?}"
            )));
        }
        match &self.layout.context {
            ContextLayout::Recurrent { l1, l2 } => {
                let triple = |l: &LstmIdx| [p[l.w_ih], p[l.w_hh], p[l.bias]];
                let h = g.bilstm(flat, triple(&l1[0]), triple(&l1[1]), crate::substrate::Merge::Concat)?;
                g.bilstm(h, triple(&l2[0]), triple(&l2[1]), self.config.lstm2_merge.into())
            }
            ContextLayout::Dense(d) => {
                let z = g.dense(flat, p[d.weight], p[d.bias])?;
                Ok(g.tanh(z))
            }
        }
    }

    /// Window-level distribution repeated over each window's timesteps: `[T × C]`.
    pub fn intermediate_head(&self, g: &mut Graph<'_>, p: &[NodeId], context: NodeId) -> Result<NodeId> {
        let d = &self.layout.inter_head;
        let logits = g.dense(context, p[d.weight], p[d.bias])?;
        let probs = g.softmax(logits)?;
        g.repeat_axis(probs, 0, self.config.window_length)
    }

    /// Dense refinement of every window: `[T × C]` (windows merged in order).
    pub fn refine<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        p: &[NodeId],
        unflat: NodeId,
        context: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let Some([c0, c1, head]) = &self.layout.refine else {
            return Err(Error::arg(format!("variant {} has no refinement head", self.variant)));
        };
        let c = &self.config;
        let [n, _, unflat_len] = *g.value(unflat).shape() else {
            return Err(Error::shape("unflattened features must be rank 3"));
        };
        if !c.window_length.is_multiple_of(unflat_len) {
            return Err(Error::Config(format!(
                "window length {} is not a multiple of feature length {unflat_len}",
                c.window_length
            )));
        }
        let factor = c.window_length / unflat_len;
        let ctx_width = g.value(context).shape()[1];
        let ctx = g.reshape(context, &[n, ctx_width, 1])?;
        let ctx = g.repeat_axis(ctx, 2, unflat_len)?;
        let x = g.concat(&[unflat, ctx], 1)?;
        let spec = ConvSpec::same(1);
        let mut x = g.conv1d(x, p[c0.weight], p[c0.bias], spec)?;
        x = g.relu(x);
        x = g.upsample_nearest(x, factor)?;
        x = g.conv1d(x, p[c1.weight], p[c1.bias], spec)?;
        x = g.relu(x);
        x = g.dropout(x, c.dropout, rng, training)?;
        let x = g.transpose_last2(x)?;
        let logits = g.dense(x, p[head.weight], p[head.bias])?;
        let probs = g.softmax(logits)?;
        g.reshape(probs, &[n * c.window_length, c.num_classes])
    }

    /// Records the whole network for a `[N × S × L]` window batch.
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<'_>,
        p: &[NodeId],
        windows: NodeId,
        training: bool,
        rng: &mut R,
    ) -> Result<Heads> {
        if p.len() != self.params.len() {
            return Err(Error::arg("parameter node list does not match the model"));
        }
        let (flat, unflat) = self.feature_extract(g, p, windows, training, rng)?;
        let context = self.context_detect(g, p, flat)?;
        let intermediate = self.intermediate_head(g, p, context)?;
        let final_ = if self.variant.has_refinement() {
            Some(self.refine(g, p, unflat, context, training, rng)?)
        } else {
            None
        };
        Ok(Heads {
            flat,
            unflat,
            context,
            intermediate,
            final_,
        })
    }

    /// Runs the network on an `[S × T]` cycle whose length is a multiple of
    /// the window length.
    pub fn forward<R: Rng + ?Sized>(&self, cycle: &Tensor, training: bool, rng: &mut R) -> Result<DualPrediction> {
        let batch = split_windows(cycle, self.config.window_length)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let w = g.input(batch.windows);
        let heads = self.build(&mut g, &p, w, training, rng)?;
        Ok(DualPrediction {
            intermediate: g.value(heads.intermediate).clone(),
            final_: heads.final_.map(|f| g.value(f).clone()),
        })
    }

    /// Inference-mode forward pass (dropout disabled).
    pub fn predict(&self, cycle: &Tensor) -> Result<DualPrediction> {
        // dropout is inactive, so the generator is never drawn from
        self.forward(cycle, false, &mut fork(0, Stream::Dropout))
    }
}

/// Fresh randomly initialised model of `variant` for `config`.
pub fn make_ablation(config: ModelConfig, variant: Variant, seed: u64) -> Result<PrecTime> {
    PrecTime::with_variant(config, variant, seed)
}
