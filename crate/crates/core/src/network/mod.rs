//! The two-branch feature network.
//!
//! ```text
//! patch -> conv trunk -> dense(2d) -> split -+-> env head -> f1 -+-> p1 (projection)
//!                                            |                   +-> h  (discriminator)
//!                                            +-> cat head -> f2 -+-> p2 (projection)
//!                                                                +-> h  (shared)
//!                                    f1 * f2 (elementwise) -> g (classifier)
//! ```
//!
//! Every head uses ReLU between layers. Branch heads end in ReLU; projection,
//! classifier and discriminator end in a plain affine layer, followed by
//! softmax for the last two.
//!
//! Backbones (P = patch size, B = bands, pads keep P x P spatially):
//!
//! | kind        | layers                                                                      |
//! |-------------|-----------------------------------------------------------------------------|
//! | `compact3d` | conv3d 1->4 k(3,3,3); conv3d 4->8 k(3,3,3) depth stride 2; flatten           |
//! | `hybrid`    | the two compact3d convs, then conv 8->16 whose kernel spans all remaining depth (a 2-D conv over 8*D channels); flatten |
//! | `plain2d`   | conv 1->16 k(3,3,B) (bands as channels); conv 16->16 k(3,3,1); flatten       |
//!
//! The flattened trunk feeds one dense layer of width `2d`, split into the
//! environmental and categorical halves.

pub mod checkpoint;
pub mod layers;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datacube::Patch;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossConfig};
use crate::rng;
use crate::tensor::Matrix;
use layers::{relu_backward, relu_in_place, softmax, Conv3d, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Compact3d,
    Hybrid,
    Plain2d,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact3d" => Ok(Self::Compact3d),
            "hybrid" => Ok(Self::Hybrid),
            "plain2d" => Ok(Self::Plain2d),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub backbone: BackboneKind,
    pub feature_dim: usize,
    pub projection_dims: Vec<usize>,
    pub discriminator_dims: Vec<usize>,
    pub num_classes: usize,
    pub patch_size: usize,
    pub bands: usize,
    pub init_seed: u64,
}

impl NetworkSpec {
    pub fn new(num_classes: usize, bands: usize) -> Self {
        Self {
            backbone: BackboneKind::Compact3d,
            feature_dim: 128,
            projection_dims: vec![128, 64, 64],
            discriminator_dims: vec![128, 64, 2],
            num_classes,
            patch_size: 5,
            bands,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if d == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "patch size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.projection_dims.len() < 2 || self.projection_dims[0] != d {
            return Err(Error::invalid(format!(
                "projection dims {:?} must start at the feature dimension {d}",
                self.projection_dims
            )));
        }
        if self.discriminator_dims.len() < 2
            || self.discriminator_dims[0] != d
            || *self.discriminator_dims.last().unwrap() != 2
        {
            return Err(Error::invalid(format!(
                "discriminator dims {:?} must run from {d} to 2",
                self.discriminator_dims
            )));
        }
        if self
            .projection_dims
            .iter()
            .chain(&self.discriminator_dims)
            .any(|&w| w == 0)
        {
            return Err(Error::invalid("layer widths must be positive"));
        }
        conv_stack(self.backbone, self.patch_size, self.bands).map(|_| ())
    }
}

fn conv_stack(kind: BackboneKind, patch: usize, bands: usize) -> Result<Vec<Conv3d>> {
    let p = patch;
    let compact = |bands: usize| -> Result<Vec<Conv3d>> {
        if bands < 5 {
            return Err(Error::invalid(format!(
                "{kind:?} backbone needs at least 5 bands, got {bands}"
            )));
        }
        let c1 = Conv3d {
            in_channels: 1,
            out_channels: 4,
            in_shape: (p, p, bands),
            kernel: (3, 3, 3),
            pad: (1, 1),
            depth_stride: 1,
        };
        let c2 = Conv3d {
            in_channels: 4,
            out_channels: 8,
            in_shape: c1.out_shape(),
            kernel: (3, 3, 3),
            pad: (1, 1),
            depth_stride: 2,
        };
        Ok(vec![c1, c2])
    };
    Ok(match kind {
        BackboneKind::Compact3d => compact(bands)?,
        BackboneKind::Hybrid => {
            let mut convs = compact(bands)?;
            let prev = convs[1];
            let depth = prev.out_shape().2;
            convs.push(Conv3d {
                in_channels: 8,
                out_channels: 16,
                in_shape: prev.out_shape(),
                kernel: (3, 3, depth),
                pad: (1, 1),
                depth_stride: 1,
            });
            convs
        }
        BackboneKind::Plain2d => {
            let c1 = Conv3d {
                in_channels: 1,
                out_channels: 16,
                in_shape: (p, p, bands),
                kernel: (3, 3, bands),
                pad: (1, 1),
                depth_stride: 1,
            };
            let c2 = Conv3d {
                in_channels: 16,
                out_channels: 16,
                in_shape: c1.out_shape(),
                kernel: (3, 3, 1),
                pad: (1, 1),
                depth_stride: 1,
            };
            vec![c1, c2]
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub params: Vec<Param>,
}

impl ModelState {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient arrays aligned index-for-index with `ModelState::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub names: Vec<String>,
    pub arrays: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &ModelState) -> Self {
        Self {
            names: model.params.iter().map(|p| p.name.clone()).collect(),
            arrays: model.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.arrays[i].as_slice())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slot {
    weight: usize,
    bias: usize,
}

/// Resolved layer geometry and parameter slots for a spec.
#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<(Conv3d, Slot)>,
    trunk: (Dense, Slot),
    env_head: (Dense, Slot),
    cat_head: (Dense, Slot),
    env_proj: Vec<(Dense, Slot)>,
    cat_proj: Vec<(Dense, Slot)>,
    classifier: (Dense, Slot),
    discriminator: Vec<(Dense, Slot)>,
}

struct ParamPlan {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

impl Layout {
    fn build(spec: &NetworkSpec) -> Result<(Self, Vec<ParamPlan>)> {
        spec.validate()?;
        let mut plans = Vec::new();
        let mut add = |name: String, weight_shape: Vec<usize>, fan_in: usize, out: usize| {
            let weight = plans.len();
            plans.push(ParamPlan {
                name: format!("{name}.weight"),
                shape: weight_shape,
                fan_in,
            });
            plans.push(ParamPlan {
                name: format!("{name}.bias"),
                shape: vec![out],
                fan_in,
            });
            Slot {
                weight,
                bias: weight + 1,
            }
        };

        let convs: Vec<(Conv3d, Slot)> = conv_stack(spec.backbone, spec.patch_size, spec.bands)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let (kh, kw, kd) = c.kernel;
                let slot = add(
                    format!("backbone.conv{}", i + 1),
                    vec![c.out_channels, c.in_channels, kh, kw, kd],
                    c.fan_in(),
                    c.out_channels,
                );
                (c, slot)
            })
            .collect();
        let d = spec.feature_dim;
        let flat = convs.last().map(|(c, _)| c.out_len()).unwrap();
        let mut dense = |name: String, inputs: usize, outputs: usize| {
            let slot = add(name, vec![outputs, inputs], inputs, outputs);
            (Dense { inputs, outputs }, slot)
        };
        let trunk = dense("backbone.fc".into(), flat, 2 * d);
        let env_head = dense("env_head".into(), d, d);
        let cat_head = dense("cat_head".into(), d, d);
        let mut mlp = |prefix: &str, dims: &[usize]| -> Vec<(Dense, Slot)> {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| dense(format!("{prefix}.{i}"), w[0], w[1]))
                .collect()
        };
        let env_proj = mlp("env_proj", &spec.projection_dims);
        let cat_proj = mlp("cat_proj", &spec.projection_dims);
        let discriminator = mlp("discriminator", &spec.discriminator_dims);
        let classifier = dense("classifier".into(), d, spec.num_classes);
        Ok((
            Self {
                convs,
                trunk,
                env_head,
                cat_head,
                env_proj,
                cat_proj,
                classifier,
                discriminator,
            },
            plans,
        ))
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// for weights and biases alike. Each array draws from its own stream.
pub fn init_model(spec: &NetworkSpec) -> Result<ModelState> {
    use rand::Rng;
    let (_, plans) = Layout::build(spec)?;
    let params = plans
        .into_iter()
        .enumerate()
        .map(|(i, plan)| {
            let bound = 1.0 / (plan.fan_in as f64).sqrt();
            let mut rng = rng::keyed(spec.init_seed, i as u64);
            let n: usize = plan.shape.iter().product();
            Param {
                name: plan.name,
                shape: plan.shape,
                data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
            }
        })
        .collect();
    Ok(ModelState {
        spec: spec.clone(),
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub env_features: Matrix,
    pub cat_features: Matrix,
    pub env_proj: Matrix,
    pub cat_proj: Matrix,
    pub class_probs: Matrix,
    pub disc_probs_env: Matrix,
    pub disc_probs_cat: Matrix,
}

/// Elementwise product of the two branch features.
pub fn fuse_features(env: &Matrix, cat: &Matrix) -> Result<Matrix> {
    if env.shape() != cat.shape() {
        return Err(Error::invalid(format!(
            "cannot fuse features of shapes {:?} and {:?}",
            env.shape(),
            cat.shape()
        )));
    }
    Ok(Matrix {
        rows: env.rows,
        cols: env.cols,
        data: env.data.iter().zip(&cat.data).map(|(a, b)| a * b).collect(),
    })
}

/// Activations of one sample, kept for the backward pass.
struct Trace {
    /// Input of each conv, then the (ReLU'd) output of the last one.
    volumes: Vec<Vec<f64>>,
    trunk: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    env_proj: Vec<Vec<f64>>,
    cat_proj: Vec<Vec<f64>>,
    fused: Vec<f64>,
    class_probs: Vec<f64>,
    disc_env: Vec<Vec<f64>>,
    disc_cat: Vec<Vec<f64>>,
    disc_env_probs: Vec<f64>,
    disc_cat_probs: Vec<f64>,
}

/// Runs an MLP, returning `[input, a1, ..., aL]`; ReLU on every layer
/// except the last unless `relu_last`.
fn mlp_forward(layers: &[(Dense, Slot)], params: &[Param], x: &[f64], relu_last: bool) -> Vec<Vec<f64>> {
    let mut acts = vec![x.to_vec()];
    for (i, (layer, slot)) in layers.iter().enumerate() {
        let mut y = layer.forward(acts.last().unwrap(), &params[slot.weight].data, &params[slot.bias].data);
        if relu_last || i + 1 < layers.len() {
            relu_in_place(&mut y);
        }
        acts.push(y);
    }
    acts
}

fn mlp_backward(
    layers: &[(Dense, Slot)],
    params: &[Param],
    acts: &[Vec<f64>],
    mut grad: Vec<f64>,
    grads: &mut Gradients,
    relu_last: bool,
) -> Vec<f64> {
    for (i, (layer, slot)) in layers.iter().enumerate().rev() {
        if relu_last || i + 1 < layers.len() {
            relu_backward(&acts[i + 1], &mut grad);
        }
        let (gw, gb) = two_mut(&mut grads.arrays, slot.weight, slot.bias);
        grad = layer.backward(&acts[i], &params[slot.weight].data, &grad, gw, gb);
    }
    grad
}

fn two_mut(arrays: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = arrays.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl Layout {
    fn trace(&self, params: &[Param], patch: &Patch) -> Trace {
        let mut volumes = Vec::with_capacity(self.convs.len() + 1);
        // [row][col][band] is already the single-channel [1][H][W][D] layout.
        volumes.push(patch.values.clone());
        for (conv, slot) in &self.convs {
            let mut y = conv.forward(volumes.last().unwrap(), &params[slot.weight].data, &params[slot.bias].data);
            relu_in_place(&mut y);
            volumes.push(y);
        }
        let (trunk_layer, trunk_slot) = &self.trunk;
        let mut trunk = trunk_layer.forward(
            volumes.last().unwrap(),
            &params[trunk_slot.weight].data,
            &params[trunk_slot.bias].data,
        );
        relu_in_place(&mut trunk);
        let d = self.env_head.0.inputs;
        let head = |(layer, slot): &(Dense, Slot), x: &[f64]| {
            let mut y = layer.forward(x, &params[slot.weight].data, &params[slot.bias].data);
            relu_in_place(&mut y);
            y
        };
        let f1 = head(&self.env_head, &trunk[..d]);
        let f2 = head(&self.cat_head, &trunk[d..]);
        let env_proj = mlp_forward(&self.env_proj, params, &f1, false);
        let cat_proj = mlp_forward(&self.cat_proj, params, &f2, false);
        let fused: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a * b).collect();
        let (cls, cslot) = &self.classifier;
        let class_probs = softmax(&cls.forward(&fused, &params[cslot.weight].data, &params[cslot.bias].data));
        let disc_env = mlp_forward(&self.discriminator, params, &f1, false);
        let disc_cat = mlp_forward(&self.discriminator, params, &f2, false);
        let disc_env_probs = softmax(disc_env.last().unwrap());
        let disc_cat_probs = softmax(disc_cat.last().unwrap());
        Trace {
            volumes,
            trunk,
            f1,
            f2,
            env_proj,
            cat_proj,
            fused,
            class_probs,
            disc_env,
            disc_cat,
            disc_env_probs,
            disc_cat_probs,
        }
    }

    /// Upstream gradients for one sample, with respect to the projection
    /// outputs and the classifier/discriminator logits.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[Param],
        t: &Trace,
        d_env_proj: &[f64],
        d_cat_proj: &[f64],
        d_class_logits: &[f64],
        d_disc_env: &[f64],
        d_disc_cat: &[f64],
        grads: &mut Gradients,
    ) {
        let (cls, cslot) = &self.classifier;
        let d_fused = {
            let (gw, gb) = two_mut(&mut grads.arrays, cslot.weight, cslot.bias);
            cls.backward(&t.fused, &params[cslot.weight].data, d_class_logits, gw, gb)
        };
        let mut df1: Vec<f64> = d_fused.iter().zip(&t.f2).map(|(g, b)| g * b).collect();
        let mut df2: Vec<f64> = d_fused.iter().zip(&t.f1).map(|(g, a)| g * a).collect();
        let add = |acc: &mut Vec<f64>, g: Vec<f64>| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        add(&mut df1, mlp_backward(&self.env_proj, params, &t.env_proj, d_env_proj.to_vec(), grads, false));
        add(&mut df2, mlp_backward(&self.cat_proj, params, &t.cat_proj, d_cat_proj.to_vec(), grads, false));
        add(&mut df1, mlp_backward(&self.discriminator, params, &t.disc_env, d_disc_env.to_vec(), grads, false));
        add(&mut df2, mlp_backward(&self.discriminator, params, &t.disc_cat, d_disc_cat.to_vec(), grads, false));

        let d = df1.len();
        let mut d_trunk = vec![0.0; 2 * d];
        for ((layer, slot), f, df, range) in [
            (&self.env_head, &t.f1, &mut df1, 0..d),
            (&self.cat_head, &t.f2, &mut df2, d..2 * d),
        ] {
            relu_backward(f, df);
            let (gw, gb) = two_mut(&mut grads.arrays, slot.weight, slot.bias);
            let gx = layer.backward(&t.trunk[range.clone()], &params[slot.weight].data, df, gw, gb);
            d_trunk[range].copy_from_slice(&gx);
        }
        relu_backward(&t.trunk, &mut d_trunk);
        let (trunk_layer, tslot) = &self.trunk;
        let mut grad = {
            let (gw, gb) = two_mut(&mut grads.arrays, tslot.weight, tslot.bias);
            trunk_layer.backward(t.volumes.last().unwrap(), &params[tslot.weight].data, &d_trunk, gw, gb)
        };
        for (i, (conv, slot)) in self.convs.iter().enumerate().rev() {
            relu_backward(&t.volumes[i + 1], &mut grad);
            let (gw, gb) = two_mut(&mut grads.arrays, slot.weight, slot.bias);
            match conv.backward(&t.volumes[i], &params[slot.weight].data, &grad, gw, gb, i > 0) {
                Some(g) => grad = g,
                None => break,
            }
        }
    }
}

fn check_batch(spec: &NetworkSpec, batch: &[Patch]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for p in batch {
        if p.size != spec.patch_size || p.bands != spec.bands {
            return Err(Error::invalid(format!(
                "patch {}x{}x{} does not match network input {}x{}x{}",
                p.size, p.size, p.bands, spec.patch_size, spec.patch_size, spec.bands
            )));
        }
    }
    Ok(())
}

fn layout_for(model: &ModelState) -> Result<Layout> {
    let (layout, plans) = Layout::build(&model.spec)?;
    let consistent = plans.len() == model.params.len()
        && plans
            .iter()
            .zip(&model.params)
            .all(|(plan, p)| plan.name == p.name && plan.shape == p.shape && p.data.len() == plan.shape.iter().product::<usize>());
    if !consistent {
        return Err(Error::invalid("model parameters do not match the network spec"));
    }
    Ok(layout)
}

fn traces(layout: &Layout, model: &ModelState, batch: &[Patch]) -> Vec<Trace> {
    batch.par_iter().map(|p| layout.trace(&model.params, p)).collect()
}

fn outputs_from(traces: &[Trace]) -> ForwardOutputs {
    let collect = |f: &dyn Fn(&Trace) -> &[f64]| {
        Matrix::from_rows(&traces.iter().map(|t| f(t).to_vec()).collect::<Vec<_>>())
    };
    ForwardOutputs {
        env_features: collect(&|t| &t.f1),
        cat_features: collect(&|t| &t.f2),
        env_proj: collect(&|t| t.env_proj.last().unwrap()),
        cat_proj: collect(&|t| t.cat_proj.last().unwrap()),
        class_probs: collect(&|t| &t.class_probs),
        disc_probs_env: collect(&|t| &t.disc_env_probs),
        disc_probs_cat: collect(&|t| &t.disc_cat_probs),
    }
}

/// Forward pass over a batch. The network has no stochastic or
/// batch-coupled layers, so both modes compute the same function and every
/// output row depends only on its own patch.
pub fn forward(model: &ModelState, batch: &[Patch], _mode: Mode) -> Result<ForwardOutputs> {
    check_batch(&model.spec, batch)?;
    let layout = layout_for(model)?;
    let out = outputs_from(&traces(&layout, model, batch));
    if !out.class_probs.data.iter().chain(&out.env_proj.data).all(|v| v.is_finite()) {
        return Err(Error::invalid("non-finite activations (diverged parameters)"));
    }
    Ok(out)
}

/// Class predictions (1-based), lowest class index on ties.
pub fn predict(model: &ModelState, batch: &[Patch]) -> Result<Vec<u16>> {
    let out = forward(model, batch, Mode::Eval)?;
    Ok(out.class_probs.iter_rows().map(argmax).map(|k| k as u16 + 1).collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-term multipliers applied when differentiating `l0 + le + lc + ld`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub l0: f64,
    pub le: f64,
    pub lc: f64,
    pub ld: f64,
}

impl TermWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        Self {
            l0: 1.0,
            le: cfg.alpha,
            lc: cfg.beta,
            ld: cfg.gamma,
        }
    }
}

/// Samples per gradient-accumulation chunk. Chunks are summed in order, so
/// results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Loss terms and the gradient of `sum_t weight_t * term_t`.
pub fn weighted_gradient(
    model: &ModelState,
    batch: &[Patch],
    pseudo_labels: &[usize],
    labels: &[usize],
    margin: f64,
    weights: TermWeights,
) -> Result<(f64, [f64; 4], Gradients)> {
    check_batch(&model.spec, batch)?;
    let m = batch.len();
    if pseudo_labels.len() != m || labels.len() != m {
        return Err(Error::invalid(format!(
            "batch of {m} with {} pseudo labels and {} labels",
            pseudo_labels.len(),
            labels.len()
        )));
    }
    let layout = layout_for(model)?;
    let traces = traces(&layout, model, batch);
    let out = outputs_from(&traces);

    let (le, g_env) = losses::embedding_loss_grad(&out.env_proj, pseudo_labels, margin)?;
    let (lc, g_cat) = losses::embedding_loss_grad(&out.cat_proj, labels, margin)?;
    let (ld, g_de, g_dc) = losses::discrimination_loss_grad(&out.disc_probs_env, &out.disc_probs_cat)?;
    let (l0, g_cls) = losses::classification_loss_grad(&out.class_probs, labels)?;
    let scale = |v: &[f64], w: f64| -> Vec<f64> { v.iter().map(|x| x * w).collect() };

    let grads = traces
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(chunk, ts)| {
            let mut g = Gradients::zeros_like(model);
            for (k, t) in ts.iter().enumerate() {
                let i = chunk * GRAD_CHUNK + k;
                layout.backward(
                    &model.params,
                    t,
                    &scale(g_env.row(i), weights.le),
                    &scale(g_cat.row(i), weights.lc),
                    &scale(g_cls.row(i), weights.l0),
                    &scale(g_de.row(i), weights.ld),
                    &scale(g_dc.row(i), weights.ld),
                    &mut g,
                );
            }
            g
        })
        .collect::<Vec<_>>()
        .into_iter()
        .reduce(|mut a, b| {
            a.add(&b);
            a
        })
        .expect("non-empty batch");

    let total = weights.l0 * l0 + weights.le * le + weights.lc * lc + weights.ld * ld;
    if !total.is_finite() || !grads.all_finite() {
        return Err(Error::invalid("non-finite loss or gradient"));
    }
    Ok((total, [l0, le, lc, ld], grads))
}

/// Loss breakdown and gradients of the total training loss.
pub fn gradient(
    model: &ModelState,
    batch: &[Patch],
    pseudo_labels: &[usize],
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (_, [l0, le, lc, ld], grads) = weighted_gradient(
        model,
        batch,
        pseudo_labels,
        labels,
        cfg.margin,
        TermWeights::from_config(cfg),
    )?;
    Ok((LossBreakdown::combine(l0, le, lc, ld, cfg), grads))
}
