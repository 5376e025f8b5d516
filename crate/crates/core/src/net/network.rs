//! Whole-network forward and backward over a [`ParamRegistry`].

use crate::error::{Error, Result};
use crate::layers::activation::{relu_backward_owned, relu_forward_owned};
use crate::layers::conv::conv_forward_owned;
use crate::layers::{
    conv_backward, global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward, maxpool_backward, maxpool_forward,
    ConvCache, ConvGeometry, GapCache, LinearCache, MaxPoolCache, PoolGeometry, ReluCache,
};
use crate::norm::pws::pws_forward_owned;
use crate::norm::wn::wn_forward_owned;
use crate::norm::{
    bn_backward, bn_forward, group_norm_backward, group_norm_forward, pws_backward, pws_fold, wn_backward, BnCache, BnConfig, BnParams,
    GammaPreset, GroupNormCache, GroupNormConfig, GroupNormParams, Mode, PwsCache, PwsConfig, PwsParams, WnCache, WnParams,
};
use crate::tensor::{he_init, Rng, Scalar, Tensor};

use super::arch::{ArchitectureSpec, LayerSpec, NormMode};
use super::registry::{Gradients, ParamId, ParamKind, ParamRegistry};

/// Build-time choices that are not part of the architecture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetOptions {
    pub pws: PwsConfig,
    /// Per-layer γ from the layer's fan-in; `None` (or the learning-rate
    /// rule) uses `pws.gamma` everywhere.
    pub gamma_rule: Option<GammaPreset>,
    /// When off, α is frozen at 1 and stored as a buffer.
    pub pws_alpha: bool,
    pub g_init: f64,
    pub gn_groups: usize,
    pub bn: BnConfig,
}

impl Default for NetOptions {
    fn default() -> Self {
        NetOptions {
            pws: PwsConfig::default(),
            gamma_rule: None,
            pws_alpha: true,
            g_init: 1.0,
            gn_groups: 16,
            bn: BnConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightTransform {
    Plain,
    Pws,
    Wn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputNorm {
    None,
    Bn,
    Gn,
}

/// Public description of one conv layer, in forward order.
#[derive(Clone, Debug)]
pub struct ConvLayerInfo {
    pub name: String,
    pub geom: ConvGeometry,
    pub weight: ParamId,
    pub transform: WeightTransform,
    pub output_norm: OutputNorm,
    /// γ buffer of PWS layers.
    pub gamma: Option<ParamId>,
}

#[derive(Clone, Debug)]
enum Transform {
    Plain,
    Pws {
        alpha: ParamId,
        beta: ParamId,
        gamma: ParamId,
        scale: ParamId,
    },
    Wn {
        g: ParamId,
    },
}

#[derive(Clone, Debug)]
enum Post {
    None,
    Bn {
        scale: ParamId,
        shift: ParamId,
        mean: ParamId,
        var: ParamId,
        seen: ParamId,
        cfg: BnConfig,
    },
    Gn {
        scale: ParamId,
        shift: ParamId,
        groups: ParamId,
        eps: f64,
    },
}

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    geom: ConvGeometry,
    relu: bool,
    weight: ParamId,
    bias: Option<ParamId>,
    transform: Transform,
    post: Post,
}

#[derive(Clone, Debug)]
enum Node {
    Conv(ConvUnit),
    MaxPool(PoolGeometry),
    Gap,
    Linear {
        weight: ParamId,
        bias: ParamId,
    },
    Residual {
        a: ConvUnit,
        b: ConvUnit,
        stride: usize,
        out_channels: usize,
    },
}

#[derive(Debug)]
enum ConvKindCache<T> {
    Plain(ConvCache<T>),
    Pws(PwsCache<T>),
    Wn(WnCache<T>),
}

#[derive(Debug)]
enum PostCache<T> {
    None,
    Bn(BnCache<T>),
    Gn(GroupNormCache<T>),
}

#[derive(Debug)]
struct UnitCache<T> {
    conv: ConvKindCache<T>,
    post: PostCache<T>,
    relu: Option<ReluCache>,
}

#[derive(Debug)]
enum NodeCache<T> {
    Conv(UnitCache<T>),
    MaxPool(MaxPoolCache),
    Gap(GapCache),
    Linear(LinearCache<T>),
    Residual {
        a: UnitCache<T>,
        b: UnitCache<T>,
        relu: ReluCache,
        in_shape: [usize; 4],
    },
}

/// A conv layer's input `X_l` and raw output `Y_l` (before any output
/// normalizer), captured when a forward pass records taps.
#[derive(Clone, Debug)]
pub struct ConvTap<T> {
    pub input: Tensor<T>,
    pub output: Tensor<T>,
}

/// Result of a forward pass: logits plus everything backward needs.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    /// One entry per conv layer, in [`Network::conv_layers`] order; empty
    /// unless taps were requested.
    pub taps: Vec<ConvTap<T>>,
    caches: Vec<NodeCache<T>>,
}

impl<T> ForwardPass<T> {
    /// Fingerprint of every ReLU mask and pooling choice in the pass.
    pub fn pattern_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3);
        let unit = |u: &UnitCache<T>| u.relu.as_ref().map_or(0, ReluCache::pattern_hash);
        for c in &self.caches {
            match c {
                NodeCache::Conv(u) => mix(unit(u)),
                NodeCache::MaxPool(m) => mix(m.pattern_hash()),
                NodeCache::Residual { a, b, relu, .. } => {
                    mix(unit(a));
                    mix(unit(b));
                    mix(relu.pattern_hash());
                }
                NodeCache::Gap(_) | NodeCache::Linear(_) => {}
            }
        }
        h
    }
}

struct BnUpdate<T> {
    mean: (ParamId, Vec<T>),
    var: (ParamId, Vec<T>),
    seen: (ParamId, u64),
}

#[derive(Clone, Debug)]
pub struct Network<T> {
    spec: ArchitectureSpec,
    mode: NormMode,
    options: NetOptions,
    registry: ParamRegistry<T>,
    nodes: Vec<Node>,
}

const TRAIN: ParamKind = ParamKind::Trainable { decay_exempt: false };
const EXEMPT: ParamKind = ParamKind::Trainable { decay_exempt: true };

fn scalar<T: Scalar>(v: f64) -> Result<Tensor<T>> {
    Tensor::full(&[1], T::lit(v))
}

fn read_scalar<T: Scalar>(t: &Tensor<T>) -> f64 {
    t.data()[0].to_f64_lossy()
}

struct Builder<'a, T> {
    registry: ParamRegistry<T>,
    mode: NormMode,
    options: NetOptions,
    rng: &'a mut Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn unit(&mut self, name: String, geom: ConvGeometry, relu: bool, head: bool) -> Result<ConvUnit> {
        let [d, c, k, _] = geom.weight_shape();
        let gamma = match self.options.gamma_rule {
            Some(rule) if rule != GammaPreset::LearningRate => rule.gamma(0.0, geom.fan_in()),
            _ => self.options.pws.gamma,
        };
        let r = &mut self.registry;
        let weight = r.register(format!("{name}.weight"), he_init(d, c, k, self.rng)?, TRAIN)?;
        let post = match (self.mode, head) {
            (NormMode::Bn, false) => Post::Bn {
                scale: r.register(format!("{name}.bn.scale"), Tensor::full(&[d], T::one())?, TRAIN)?,
                shift: r.register(format!("{name}.bn.shift"), Tensor::zeros(&[d])?, TRAIN)?,
                mean: r.register(format!("{name}.bn.running_mean"), Tensor::zeros(&[d])?, ParamKind::Buffer)?,
                var: r.register(format!("{name}.bn.running_var"), Tensor::full(&[d], T::one())?, ParamKind::Buffer)?,
                seen: r.register(format!("{name}.bn.num_batches_tracked"), scalar(0.0)?, ParamKind::Buffer)?,
                cfg: self.options.bn,
            },
            (NormMode::Gn, false) => {
                let groups = self.options.gn_groups;
                if groups == 0 || d % groups != 0 {
                    return Err(Error::domain(format!("{name}: {d} channels cannot be split into {groups} groups")));
                }
                Post::Gn {
                    scale: r.register(format!("{name}.gn.scale"), Tensor::full(&[d], T::one())?, TRAIN)?,
                    shift: r.register(format!("{name}.gn.shift"), Tensor::zeros(&[d])?, TRAIN)?,
                    groups: r.register(format!("{name}.gn.groups"), scalar(groups as f64)?, ParamKind::Buffer)?,
                    eps: 1e-5,
                }
            }
            _ => Post::None,
        };
        let transform = match self.mode {
            NormMode::Pws => {
                let alpha_kind = if self.options.pws_alpha { EXEMPT } else { ParamKind::Buffer };
                Transform::Pws {
                    alpha: r.register(format!("{name}.alpha"), Tensor::full(&[d], T::one())?, alpha_kind)?,
                    beta: r.register(format!("{name}.beta"), Tensor::zeros(&[d])?, EXEMPT)?,
                    gamma: r.register(format!("{name}.gamma"), scalar(gamma)?, ParamKind::Buffer)?,
                    scale: r.register(
                        format!("{name}.pws_scale"),
                        scalar(if self.options.pws.scale_sqrt2nl { 1.0 } else { 0.0 })?,
                        ParamKind::Buffer,
                    )?,
                }
            }
            NormMode::Wn => Transform::Wn {
                g: r.register(format!("{name}.g"), Tensor::full(&[d], T::lit(self.options.g_init))?, EXEMPT)?,
            },
            _ => Transform::Plain,
        };
        let bias = match (&transform, &post) {
            (Transform::Pws { .. }, _) | (_, Post::Bn { .. }) | (_, Post::Gn { .. }) => None,
            _ => Some(r.register(format!("{name}.bias"), Tensor::zeros(&[d])?, TRAIN)?),
        };
        Ok(ConvUnit {
            name,
            geom,
            relu,
            weight,
            bias,
            transform,
            post,
        })
    }
}

fn shortcut<T: Scalar>(x: &Tensor<T>, stride: usize, out_channels: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Tensor::zeros(&[n, out_channels, oh, ow])?;
    let (xd, od) = (x.data(), out.data_mut());
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    od[((s * out_channels + ch) * oh + i) * ow + j] = xd[((s * c + ch) * h + i * stride) * w + j * stride];
                }
            }
        }
    }
    Ok(out)
}

fn shortcut_backward<T: Scalar>(g: &Tensor<T>, in_shape: [usize; 4], stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_shape;
    let [_, out_channels, oh, ow] = g.dims4()?;
    let mut dx = Tensor::zeros(&in_shape)?;
    let (gd, dd) = (g.data(), dx.data_mut());
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    dd[((s * c + ch) * h + i * stride) * w + j * stride] = gd[((s * out_channels + ch) * oh + i) * ow + j];
                }
            }
        }
    }
    Ok(dx)
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: ArchitectureSpec, mode: NormMode, options: NetOptions, rng: &mut Rng) -> Result<Self> {
        spec.output_shape()?;
        if mode == NormMode::Pws && !(options.pws.gamma >= 0.0) {
            return Err(Error::domain(format!("pws gamma must be non-negative, got {}", options.pws.gamma)));
        }
        let mut b = Builder {
            registry: ParamRegistry::new(),
            mode,
            options,
            rng,
        };
        let mut nodes = Vec::with_capacity(spec.layers.len());
        let (mut convs, mut blocks) = (0, 0);
        for layer in &spec.layers {
            let node = match *layer {
                LayerSpec::Conv { geom, relu, head } => {
                    convs += 1;
                    Node::Conv(b.unit(format!("conv{convs}"), geom, relu, head)?)
                }
                LayerSpec::MaxPool(p) => Node::MaxPool(p),
                LayerSpec::GlobalAvgPool => Node::Gap,
                LayerSpec::Linear { inputs, outputs } => {
                    let std = (1.0 / inputs as f64).sqrt();
                    let w = b.rng.gaussian_tensor(&[outputs, inputs], 0.0, std)?;
                    Node::Linear {
                        weight: b.registry.register("fc.weight", w, TRAIN)?,
                        bias: b.registry.register("fc.bias", Tensor::zeros(&[outputs])?, TRAIN)?,
                    }
                }
                LayerSpec::Residual {
                    in_channels,
                    out_channels,
                    stride,
                } => {
                    blocks += 1;
                    let ga = ConvGeometry::new(in_channels, out_channels, 3, stride, 1);
                    let gb = ConvGeometry::same(out_channels, out_channels, 3);
                    Node::Residual {
                        a: b.unit(format!("block{blocks}.conv_a"), ga, true, false)?,
                        b: b.unit(format!("block{blocks}.conv_b"), gb, false, false)?,
                        stride,
                        out_channels,
                    }
                }
            };
            nodes.push(node);
        }
        Ok(Network {
            spec,
            mode,
            options,
            registry: b.registry,
            nodes,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn options(&self) -> &NetOptions {
        &self.options
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    /// Trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        self.registry.trainable_count()
    }

    fn units(&self) -> Vec<&ConvUnit> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Conv(u) => out.push(u),
                Node::Residual { a, b, .. } => {
                    out.push(a);
                    out.push(b);
                }
                _ => {}
            }
        }
        out
    }

    pub fn conv_layers(&self) -> Vec<ConvLayerInfo> {
        self.units()
            .into_iter()
            .map(|u| ConvLayerInfo {
                name: u.name.clone(),
                geom: u.geom,
                weight: u.weight,
                transform: match u.transform {
                    Transform::Plain => WeightTransform::Plain,
                    Transform::Pws { .. } => WeightTransform::Pws,
                    Transform::Wn { .. } => WeightTransform::Wn,
                },
                output_norm: match u.post {
                    Post::None => OutputNorm::None,
                    Post::Bn { .. } => OutputNorm::Bn,
                    Post::Gn { .. } => OutputNorm::Gn,
                },
                gamma: match u.transform {
                    Transform::Pws { gamma, .. } => Some(gamma),
                    _ => None,
                },
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        let cfg = &self.spec.config;
        if c != cfg.in_channels || h != cfg.in_size || w != cfg.in_size {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: x.shape().to_vec(),
                right: vec![0, cfg.in_channels, cfg.in_size, cfg.in_size],
            });
        }
        Ok(())
    }

    /// Forward pass. In train mode BN layers use batch statistics and their
    /// running averages are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let (pass, updates) = self.forward_impl(x, mode, false)?;
        self.apply(updates);
        Ok(pass)
    }

    /// Like [`Network::forward`], also capturing each conv layer's input and
    /// output.
    pub fn forward_recording(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let (pass, updates) = self.forward_impl(x, mode, true)?;
        self.apply(updates);
        Ok(pass)
    }

    /// Forward pass that never touches running statistics, whatever the mode.
    pub fn forward_pure(&self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<ForwardPass<T>> {
        Ok(self.forward_impl(x, mode, record)?.0)
    }

    /// Inference logits.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_impl(x, Mode::Infer, false)?.0.logits)
    }

    fn apply(&mut self, updates: Vec<BnUpdate<T>>) {
        for u in updates {
            self.registry.value_mut(u.mean.0).data_mut().copy_from_slice(&u.mean.1);
            self.registry.value_mut(u.var.0).data_mut().copy_from_slice(&u.var.1);
            self.registry.value_mut(u.seen.0).data_mut()[0] = T::lit(u.seen.1 as f64);
        }
    }

    fn forward_impl(&self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<(ForwardPass<T>, Vec<BnUpdate<T>>)> {
        self.check_input(x)?;
        let mut taps = Vec::new();
        let mut updates = Vec::new();
        let mut caches = Vec::with_capacity(self.nodes.len());
        let mut h = x.clone();
        for node in &self.nodes {
            let tap = if record { Some(&mut taps) } else { None };
            let (next, cache) = match node {
                Node::Conv(u) => {
                    let (y, c) = self.unit_forward(u, h, mode, tap, &mut updates)?;
                    (y, NodeCache::Conv(c))
                }
                Node::MaxPool(p) => {
                    let (y, c) = maxpool_forward(&h, *p)?;
                    (y, NodeCache::MaxPool(c))
                }
                Node::Gap => {
                    let (y, c) = global_avg_pool_forward(&h)?;
                    (y, NodeCache::Gap(c))
                }
                Node::Linear { weight, bias } => {
                    let (y, c) = linear_forward(&h, self.registry.value(*weight), self.registry.value(*bias).data())?;
                    (y, NodeCache::Linear(c))
                }
                Node::Residual {
                    a,
                    b,
                    stride,
                    out_channels,
                } => {
                    let in_shape = h.dims4()?;
                    let short = shortcut(&h, *stride, *out_channels)?;
                    let (ya, ca) = self.unit_forward(a, h, mode, tap, &mut updates)?;
                    let tap = if record { Some(&mut taps) } else { None };
                    let (mut yb, cb) = self.unit_forward(b, ya, mode, tap, &mut updates)?;
                    yb.add_assign(&short)?;
                    let (y, relu) = relu_forward_owned(yb);
                    (
                        y,
                        NodeCache::Residual {
                            a: ca,
                            b: cb,
                            relu,
                            in_shape,
                        },
                    )
                }
            };
            h = next;
            caches.push(cache);
        }
        Ok((ForwardPass { logits: h, taps, caches }, updates))
    }

    fn unit_forward(
        &self,
        u: &ConvUnit,
        x: Tensor<T>,
        mode: Mode,
        taps: Option<&mut Vec<ConvTap<T>>>,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<(Tensor<T>, UnitCache<T>)> {
        let r = &self.registry;
        let input = taps.is_some().then(|| x.clone());
        let weight = r.value(u.weight);
        let bias = u.bias.map(|b| r.value(b).data());
        let (y, conv) = match u.transform {
            Transform::Plain => {
                let (y, c) = conv_forward_owned(x, weight, bias, &u.geom)?;
                (y, ConvKindCache::Plain(c))
            }
            Transform::Pws { alpha, beta, gamma, scale } => {
                let p = PwsParams {
                    weight,
                    alpha: r.value(alpha).data(),
                    beta: r.value(beta).data(),
                    cfg: PwsConfig {
                        gamma: read_scalar(r.value(gamma)),
                        scale_sqrt2nl: read_scalar(r.value(scale)) != 0.0,
                    },
                };
                let (y, c) = pws_forward_owned(x, &p, &u.geom)?;
                (y, ConvKindCache::Pws(c))
            }
            Transform::Wn { g } => {
                let p = WnParams {
                    weight,
                    g: r.value(g).data(),
                    bias,
                };
                let (y, c) = wn_forward_owned(x, &p, &u.geom).map_err(|e| e.in_layer(&u.name))?;
                (y, ConvKindCache::Wn(c))
            }
        };
        if let (Some(taps), Some(input)) = (taps, input) {
            taps.push(ConvTap { input, output: y.clone() });
        }
        let (y, post) = match u.post {
            Post::None => (y, PostCache::None),
            Post::Bn {
                scale,
                shift,
                mean,
                var,
                seen,
                cfg,
            } => {
                let mut p = BnParams {
                    cfg,
                    scale: r.value(scale).data().to_vec(),
                    shift: r.value(shift).data().to_vec(),
                    running_mean: r.value(mean).data().to_vec(),
                    running_var: r.value(var).data().to_vec(),
                    batches_seen: read_scalar(r.value(seen)) as u64,
                };
                let (out, c) = bn_forward(&y, &mut p, mode).map_err(|e| match e {
                    Error::State(m) => Error::State(format!("{}: {m}", u.name)),
                    other => other,
                })?;
                if mode == Mode::Train {
                    updates.push(BnUpdate {
                        mean: (mean, p.running_mean),
                        var: (var, p.running_var),
                        seen: (seen, p.batches_seen),
                    });
                }
                (out, PostCache::Bn(c))
            }
            Post::Gn { scale, shift, groups, eps } => {
                let p = GroupNormParams {
                    cfg: GroupNormConfig {
                        groups: read_scalar(r.value(groups)) as usize,
                        eps,
                    },
                    scale: Some(r.value(scale).data()),
                    shift: Some(r.value(shift).data()),
                };
                let (out, c) = group_norm_forward(&y, &p)?;
                (out, PostCache::Gn(c))
            }
        };
        let (y, relu) = if u.relu {
            let (y, c) = relu_forward_owned(y);
            (y, Some(c))
        } else {
            (y, None)
        };
        Ok((y, UnitCache { conv, post, relu }))
    }

    pub fn backward(&self, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        Ok(self.backward_impl(pass, dlogits, false)?.0)
    }

    /// Also returns `dL/dY_l` for every conv output (before any output
    /// normalizer), in [`Network::conv_layers`] order.
    pub fn backward_recording(&self, pass: &ForwardPass<T>, dlogits: &Tensor<T>) -> Result<(Gradients<T>, Vec<Tensor<T>>)> {
        self.backward_impl(pass, dlogits, true)
    }

    fn backward_impl(&self, pass: &ForwardPass<T>, dlogits: &Tensor<T>, record: bool) -> Result<(Gradients<T>, Vec<Tensor<T>>)> {
        if pass.caches.len() != self.nodes.len() {
            return Err(Error::state("forward pass was produced by a different network"));
        }
        if dlogits.shape() != pass.logits.shape() {
            return Err(Error::state(format!(
                "loss gradient {:?} does not match logits {:?}",
                dlogits.shape(),
                pass.logits.shape()
            )));
        }
        let mut grads = Gradients::zeros(&self.registry);
        let mut conv_grads = Vec::new();
        let mut g = dlogits.clone();
        for (node, cache) in self.nodes.iter().zip(&pass.caches).rev() {
            let rec = if record { Some(&mut conv_grads) } else { None };
            g = match (node, cache) {
                (Node::Conv(u), NodeCache::Conv(c)) => self.unit_backward(u, c, g, &mut grads, rec)?,
                (Node::MaxPool(_), NodeCache::MaxPool(c)) => maxpool_backward(&g, c)?,
                (Node::Gap, NodeCache::Gap(c)) => global_avg_pool_backward(&g, c)?,
                (Node::Linear { weight, bias }, NodeCache::Linear(c)) => {
                    let lg = linear_backward(&g, c)?;
                    grads.accumulate(*weight, lg.dw.data());
                    grads.accumulate(*bias, &lg.db);
                    lg.dx
                }
                (
                    Node::Residual { a, b, stride, .. },
                    NodeCache::Residual {
                        a: ca,
                        b: cb,
                        relu,
                        in_shape,
                    },
                ) => {
                    let g = relu_backward_owned(g, relu)?;
                    let short = shortcut_backward(&g, *in_shape, *stride)?;
                    let gb = self.unit_backward(b, cb, g, &mut grads, rec)?;
                    let rec = if record { Some(&mut conv_grads) } else { None };
                    let mut dx = self.unit_backward(a, ca, gb, &mut grads, rec)?;
                    dx.add_assign(&short)?;
                    dx
                }
                _ => return Err(Error::state("forward cache does not match network layout")),
            };
        }
        conv_grads.reverse();
        Ok((grads, conv_grads))
    }

    fn unit_backward(
        &self,
        u: &ConvUnit,
        cache: &UnitCache<T>,
        g: Tensor<T>,
        grads: &mut Gradients<T>,
        record: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Tensor<T>> {
        let g = match &cache.relu {
            Some(c) => relu_backward_owned(g, c)?,
            None => g,
        };
        let g = match (&u.post, &cache.post) {
            (Post::None, PostCache::None) => g,
            (Post::Bn { scale, shift, .. }, PostCache::Bn(c)) => {
                let bg = bn_backward(&g, c).map_err(|e| match e {
                    Error::State(m) => Error::State(format!("{}: {m}", u.name)),
                    other => other,
                })?;
                if let (Some(ds), Some(db)) = (&bg.dscale, &bg.dshift) {
                    grads.accumulate(*scale, ds);
                    grads.accumulate(*shift, db);
                }
                bg.dy
            }
            (Post::Gn { scale, shift, .. }, PostCache::Gn(c)) => {
                let gg = group_norm_backward(&g, c)?;
                if let (Some(ds), Some(db)) = (&gg.dscale, &gg.dshift) {
                    grads.accumulate(*scale, ds);
                    grads.accumulate(*shift, db);
                }
                gg.dy
            }
            _ => return Err(Error::state("forward cache does not match network layout")),
        };
        if let Some(r) = record {
            r.push(g.clone());
        }
        match (&u.transform, &cache.conv) {
            (Transform::Plain, ConvKindCache::Plain(c)) => {
                let cg = conv_backward(&g, c)?;
                grads.accumulate(u.weight, cg.dw.data());
                if let (Some(b), Some(db)) = (u.bias, &cg.db) {
                    grads.accumulate(b, db);
                }
                Ok(cg.dx)
            }
            (Transform::Pws { alpha, beta, .. }, ConvKindCache::Pws(c)) => {
                let pg = pws_backward(&g, c)?;
                grads.accumulate(u.weight, pg.dw.data());
                grads.accumulate(*alpha, &pg.dalpha);
                grads.accumulate(*beta, &pg.dbeta);
                Ok(pg.dx)
            }
            (Transform::Wn { g: gid }, ConvKindCache::Wn(c)) => {
                let wg = wn_backward(&g, c)?;
                grads.accumulate(u.weight, wg.dw.data());
                grads.accumulate(*gid, &wg.dg);
                if let (Some(b), Some(db)) = (u.bias, &wg.db) {
                    grads.accumulate(b, db);
                }
                Ok(wg.dx)
            }
            _ => Err(Error::state("forward cache does not match network layout")),
        }
    }

    /// Converts a PWS network into a plain one computing the same function.
    pub fn fold(&self) -> Result<Network<T>> {
        if self.mode != NormMode::Pws {
            return Err(Error::domain(format!("only pws networks can be folded, this one is {}", self.mode)));
        }
        let mut plain = Network::build(self.spec.clone(), NormMode::Plain, self.options, &mut Rng::new(0))?;
        for u in self.units() {
            let Transform::Pws { alpha, beta, gamma, scale } = u.transform else {
                return Err(Error::state(format!("{} is not a pws layer", u.name)));
            };
            let r = &self.registry;
            let p = PwsParams {
                weight: r.value(u.weight),
                alpha: r.value(alpha).data(),
                beta: r.value(beta).data(),
                cfg: PwsConfig {
                    gamma: read_scalar(r.value(gamma)),
                    scale_sqrt2nl: read_scalar(r.value(scale)) != 0.0,
                },
            };
            let (w, b) = pws_fold(&p)?;
            let wid = plain.registry.id(&format!("{}.weight", u.name));
            let bid = plain.registry.id(&format!("{}.bias", u.name));
            let (Some(wid), Some(bid)) = (wid, bid) else {
                return Err(Error::state(format!("plain build lacks {}", u.name)));
            };
            *plain.registry.value_mut(wid) = w;
            plain.registry.value_mut(bid).data_mut().copy_from_slice(&b);
        }
        for name in ["fc.weight", "fc.bias"] {
            if let (Some(src), Some(dst)) = (self.registry.id(name), plain.registry.id(name)) {
                *plain.registry.value_mut(dst) = self.registry.value(src).clone();
            }
        }
        Ok(plain)
    }

    /// Copies every value into a network of another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let mut registry = ParamRegistry::new();
        for e in self.registry.entries() {
            registry
                .register(e.name.clone(), e.value.cast(), e.kind)
                .expect("names are already unique");
        }
        Network {
            spec: self.spec.clone(),
            mode: self.mode,
            options: self.options,
            registry,
            nodes: self.nodes.clone(),
        }
    }
}
