//! Parameter storage and the building blocks of the U-Net family.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self as ag, Var};
use crate::tensor::{Scalar, Tensor};

/// What a parameter is, which decides how it is initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernel with the given fan-in.
    Kernel { fan_in: usize },
    Bias,
    NormScale,
    NormShift,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, ordered parameter storage; layers refer to entries by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, kind: ParamKind) -> ParamId {
        let fill = if kind == ParamKind::NormScale { T::one() } else { T::zero() };
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value: Tensor::full(shape, fill),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Wraps every parameter in a variable; `trainable` decides whether
    /// gradients are tracked.
    pub fn vars(&self, trainable: bool) -> ParamVars<T> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    Var::leaf(e.value.clone())
                } else {
                    Var::constant(e.value.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: e.value.map(|v| U::from(*v).expect("cast")),
                })
                .collect(),
        }
    }
}

/// Parameters lifted into the autodiff graph for one forward pass.
pub struct ParamVars<T: Scalar> {
    vars: Vec<Var<T>>,
}

impl<T: Scalar> ParamVars<T> {
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.vars[id.0]
    }

    /// Collects the gradient of every parameter (zeros when unreachable).
    pub fn gradients(&self, grads: &ag::Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropBlockConfig {
    pub block_size: usize,
    pub drop_prob: f64,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        DropBlockConfig {
            block_size: 5,
            drop_prob: 0.1,
        }
    }
}

/// Per-pass state: parameters, activation slope and (in training) the
/// drop-block random stream.
pub struct Ctx<T: Scalar> {
    pub params: ParamVars<T>,
    pub negative_slope: f64,
    pub(crate) drop_block: Option<(DropBlockConfig, RefCell<ChaCha8Rng>)>,
}

impl<T: Scalar> Ctx<T> {
    pub fn new(params: ParamVars<T>, negative_slope: f64) -> Self {
        Ctx {
            params,
            negative_slope,
            drop_block: None,
        }
    }

    pub fn with_drop_block(mut self, cfg: DropBlockConfig, seed: u64) -> Self {
        self.drop_block = Some((cfg, RefCell::new(ChaCha8Rng::seed_from_u64(seed))));
        self
    }

    pub fn p(&self, id: ParamId) -> &Var<T> {
        self.params.get(id)
    }

    fn act(&self, x: &Var<T>) -> Var<T> {
        ag::leaky_relu(x, self.negative_slope)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel, kernel],
            ParamKind::Kernel {
                fan_in: cin * kernel * kernel * kernel,
            },
        );
        let bias = store.add(format!("{name}.bias"), vec![cout], ParamKind::Bias);
        Conv {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        ag::conv3d(x, ctx.p(self.weight), Some(ctx.p(self.bias)), self.stride, self.pad)
    }
}

/// 2x2x2 transposed convolution with stride 2.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        // fan-in follows the usual convention for transposed kernels (dim 1)
        let weight = store.add(
            format!("{name}.weight"),
            vec![cin, cout, 2, 2, 2],
            ParamKind::Kernel { fan_in: cout * 8 },
        );
        let bias = store.add(format!("{name}.bias"), vec![cout], ParamKind::Bias);
        UpConv { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        ag::conv_transpose3d(x, ctx.p(self.weight), Some(ctx.p(self.bias)))
    }
}

#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), vec![channels], ParamKind::NormScale),
            beta: store.add(format!("{name}.beta"), vec![channels], ParamKind::NormShift),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        ag::instance_norm(x, ctx.p(self.gamma), ctx.p(self.beta), INSTANCE_NORM_EPS)
    }
}

/// Two conv -> instance norm -> LeakyReLU stages; the first may downsample.
///
/// With `residual` set, the second stage adds a (projected) identity path
/// after its normalisation and before the activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv,
    pub norm1: InstanceNorm,
    pub conv2: Conv,
    pub norm2: InstanceNorm,
    pub residual: Option<Residual>,
    /// Whether drop-block is applied after the second convolution.
    pub drop_block: bool,
}

#[derive(Clone, Debug)]
pub enum Residual {
    Identity,
    Projection(Conv),
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        residual: bool,
        drop_block: bool,
    ) -> Self {
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, stride);
        let norm1 = InstanceNorm::new(store, &format!("{name}.norm1"), cout);
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1);
        let norm2 = InstanceNorm::new(store, &format!("{name}.norm2"), cout);
        let residual = residual.then(|| {
            if cin == cout && stride == 1 {
                Residual::Identity
            } else {
                Residual::Projection(Conv::new(store, &format!("{name}.proj"), cin, cout, 1, stride))
            }
        });
        ConvBlock {
            conv1,
            norm1,
            conv2,
            norm2,
            residual,
            drop_block,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let h = ctx.act(&self.norm1.forward(ctx, &self.conv1.forward(ctx, x)));
        let mut h2 = self.conv2.forward(ctx, &h);
        drop(h);
        if self.drop_block {
            h2 = drop_block(ctx, &h2);
        }
        let h2 = self.norm2.forward(ctx, &h2);
        match &self.residual {
            None => ctx.act(&h2),
            Some(Residual::Identity) => ctx.act(&ag::add(&h2, x)),
            Some(Residual::Projection(p)) => ctx.act(&ag::add(&h2, &p.forward(ctx, x))),
        }
    }
}

fn drop_block<T: Scalar>(ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
    let Some((cfg, rng)) = ctx.drop_block.as_ref() else {
        return x.clone();
    };
    let mask = drop_block_mask(x.shape(), cfg, &mut rng.borrow_mut());
    ag::mul_const(x, mask)
}

/// DropBlock mask for a `[B, C, h, w, d]` feature map, shared across
/// channels and rescaled so the kept activations preserve the mean.
pub fn drop_block_mask<T: Scalar>(shape: &[usize], cfg: &DropBlockConfig, rng: &mut impl Rng) -> Tensor<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let sp = [shape[2], shape[3], shape[4]];
    let n: usize = sp.iter().product();
    let bs = cfg.block_size.min(sp[0]).min(sp[1]).min(sp[2]).max(1);
    let valid = [sp[0] - bs + 1, sp[1] - bs + 1, sp[2] - bs + 1];
    let valid_n: usize = valid.iter().product();
    let gamma = (cfg.drop_prob / (bs * bs * bs) as f64 * n as f64 / valid_n as f64).clamp(0.0, 1.0);
    let mut mask = Tensor::full(shape.to_vec(), T::one());
    for b in 0..batch {
        let mut keep = vec![true; n];
        for ox in 0..valid[0] {
            for oy in 0..valid[1] {
                for oz in 0..valid[2] {
                    if rng.random::<f64>() >= gamma {
                        continue;
                    }
                    for x in ox..ox + bs {
                        for y in oy..oy + bs {
                            for z in oz..oz + bs {
                                keep[(x * sp[1] + y) * sp[2] + z] = false;
                            }
                        }
                    }
                }
            }
        }
        let kept = keep.iter().filter(|k| **k).count();
        let scale = if kept == 0 { 0.0 } else { n as f64 / kept as f64 };
        for c in 0..channels {
            let plane = &mut mask.data_mut()[(b * channels + c) * n..(b * channels + c + 1) * n];
            for (m, k) in plane.iter_mut().zip(&keep) {
                *m = if *k { T::lit(scale) } else { T::zero() };
            }
        }
    }
    mask
}

/// Additive attention gate on a skip connection.
///
/// The skip features are projected (1x1x1, stride 2) to the resolution of
/// the coarser gating signal, summed with its 1x1x1 projection, passed
/// through ReLU and a 1x1x1 convolution to a single channel; the sigmoid of
/// that is trilinearly upsampled and multiplies the skip features.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub skip_proj: Conv,
    pub gate_proj: Conv,
    pub psi: Conv,
}

impl AttentionGate {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, skip_channels: usize, gate_channels: usize) -> Self {
        let inter = (skip_channels.min(gate_channels) / 2).max(1);
        AttentionGate {
            skip_proj: Conv::new(store, &format!("{name}.skip_proj"), skip_channels, inter, 1, 2),
            gate_proj: Conv::new(store, &format!("{name}.gate_proj"), gate_channels, inter, 1, 1),
            psi: Conv::new(store, &format!("{name}.psi"), inter, 1, 1, 1),
        }
    }

    /// Attention coefficients at the skip resolution, `[B, 1, ...]`.
    pub fn coefficients<T: Scalar>(&self, ctx: &Ctx<T>, skip: &Var<T>, gate: &Var<T>) -> Var<T> {
        let summed = ag::add(&self.skip_proj.forward(ctx, skip), &self.gate_proj.forward(ctx, gate));
        let alpha = ag::sigmoid(&self.psi.forward(ctx, &ag::relu(&summed)));
        ag::resize_trilinear(&alpha, skip.value().spatial())
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, skip: &Var<T>, gate: &Var<T>) -> Var<T> {
        ag::mul_channel_broadcast(skip, &self.coefficients(ctx, skip, gate))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_has_28_parameters() {
        let mut store = ParamStore::<f32>::new();
        Conv::new(&mut store, "c", 1, 1, 3, 1);
        assert_eq!(store.count_parameters(), 28);
    }

    #[test]
    fn drop_block_mask_is_binary_and_rescaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = DropBlockConfig {
            block_size: 3,
            drop_prob: 0.2,
        };
        let m: Tensor<f64> = drop_block_mask(&[2, 3, 8, 8, 8], &cfg, &mut rng);
        let plane = &m.data()[..512];
        let kept = plane.iter().filter(|v| **v > 0.0).count();
        assert!(kept < 512 && kept > 0);
        let scale = 512.0 / kept as f64;
        assert!(plane.iter().all(|v| *v == 0.0 || (*v - scale).abs() < 1e-12));
        // shared across channels
        assert_eq!(&m.data()[..512], &m.data()[512..1024]);
    }
}
