//! Memory-view mixture-of-experts fusion.
//!
//! Two same-shape feature maps — one read out of memory, one from the
//! other camera view — are fused into a target feature. Each input first
//! passes through a channel expert (global average pool over the
//! concatenated pair, then a per-input two-layer MLP ending in a sigmoid)
//! whose gate modulates it residually, `F' = g_c ⊙ F + F`. The two
//! modulated maps are then concatenated and passed through a per-input
//! spatial expert (3x3 conv, ReLU, 3x3 conv to one channel, sigmoid)
//! whose gate modulates residually per location, `F'' = g_s ⊙ F' + F'`.
//! The fused output is `F''_mem + F''_view`.
//!
//! [`fuse`] returns the output together with a [`FuseCache`] of every
//! intermediate; [`fuse_backward`] consumes the cache and produces exact
//! reverse-mode gradients for all sixteen parameter groups and both
//! inputs. [`grad_check`] compares those gradients against central finite
//! differences of a scalar probe loss.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    add, broadcast_mul_channel, broadcast_mul_spatial, concat_channels, global_avg_pool,
    slice_channels, ChannelVector, Conv3x3, FeatureMap, Linear, SpatialMap,
};

/// Absolute floor used by gradient comparison: coordinates where both
/// gradients are at most this size in magnitude always agree.
pub const GRAD_ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct ChannelRouter {
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct SpatialRouter {
    a: Conv3x3,
    b: Conv3x3,
}

/// All parameters of the fusion block. Layer shapes are kept mutually
/// consistent by construction; contents are reachable through
/// [`MoeParams::groups`] / [`MoeParams::groups_mut`] in a fixed, documented
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    channels: usize,
    hidden: usize,
    spatial_hidden: usize,
    mem_channel: ChannelRouter,
    view_channel: ChannelRouter,
    mem_spatial: SpatialRouter,
    view_spatial: SpatialRouter,
}

/// Names of the sixteen parameter groups, in the order [`MoeParams::groups`]
/// yields them. Serialization and gradient reports rely on this order.
pub const GROUP_NAMES: [&str; 16] = [
    "mem_channel.l1.weight",
    "mem_channel.l1.bias",
    "mem_channel.l2.weight",
    "mem_channel.l2.bias",
    "view_channel.l1.weight",
    "view_channel.l1.bias",
    "view_channel.l2.weight",
    "view_channel.l2.bias",
    "mem_spatial.a.weight",
    "mem_spatial.a.bias",
    "mem_spatial.b.weight",
    "mem_spatial.b.bias",
    "view_spatial.a.weight",
    "view_spatial.a.bias",
    "view_spatial.b.weight",
    "view_spatial.b.bias",
];

impl MoeParams {
    /// All-zero parameters. Useful as a gradient accumulator and as the
    /// reference point where the block reduces to `2.25 * (F_mem + F_view)`
    /// (each gate sits at sigmoid(0) = 0.5, so each residual stage scales
    /// by 1.5).
    pub fn zeros(channels: usize, hidden: usize, spatial_hidden: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::ZeroDim { what: "fusion channels" });
        }
        if hidden == 0 || spatial_hidden == 0 {
            return Err(Error::ZeroDim { what: "fusion hidden width" });
        }
        let channel_router = || -> Result<ChannelRouter> {
            Ok(ChannelRouter {
                l1: Linear::zeros(hidden, 2 * channels)?,
                l2: Linear::zeros(channels, hidden)?,
            })
        };
        let spatial_router = || -> Result<SpatialRouter> {
            Ok(SpatialRouter {
                a: Conv3x3::zeros(spatial_hidden, 2 * channels)?,
                b: Conv3x3::zeros(1, spatial_hidden)?,
            })
        };
        Ok(Self {
            channels,
            hidden,
            spatial_hidden,
            mem_channel: channel_router()?,
            view_channel: channel_router()?,
            mem_spatial: spatial_router()?,
            view_spatial: spatial_router()?,
        })
    }

    /// Fan-in-scaled uniform weights and small uniform biases, drawn from
    /// `rng` in group order.
    pub fn random(
        channels: usize,
        hidden: usize,
        spatial_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(channels, hidden, spatial_hidden)?;
        for (name, slice) in p.groups_mut() {
            if name.ends_with(".bias") {
                for v in slice {
                    *v = rng.random_range(-0.1..0.1);
                }
            } else {
                let fan_in = fan_in_for(name, channels, hidden, spatial_hidden);
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                for v in slice {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(p)
    }

    /// Training initialisation: fan-in-scaled uniform weights, zero biases,
    /// fully determined by `seed`.
    pub fn init(channels: usize, hidden: usize, spatial_hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(channels, hidden, spatial_hidden)?;
        for (name, slice) in p.groups_mut() {
            if name.ends_with(".bias") {
                continue;
            }
            let fan_in = fan_in_for(name, channels, hidden, spatial_hidden);
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for v in slice {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn spatial_hidden(&self) -> usize {
        self.spatial_hidden
    }

    /// The sixteen parameter groups, in [`GROUP_NAMES`] order.
    pub fn groups(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            (GROUP_NAMES[0], self.mem_channel.l1.weight()),
            (GROUP_NAMES[1], self.mem_channel.l1.bias()),
            (GROUP_NAMES[2], self.mem_channel.l2.weight()),
            (GROUP_NAMES[3], self.mem_channel.l2.bias()),
            (GROUP_NAMES[4], self.view_channel.l1.weight()),
            (GROUP_NAMES[5], self.view_channel.l1.bias()),
            (GROUP_NAMES[6], self.view_channel.l2.weight()),
            (GROUP_NAMES[7], self.view_channel.l2.bias()),
            (GROUP_NAMES[8], self.mem_spatial.a.weight()),
            (GROUP_NAMES[9], self.mem_spatial.a.bias()),
            (GROUP_NAMES[10], self.mem_spatial.b.weight()),
            (GROUP_NAMES[11], self.mem_spatial.b.bias()),
            (GROUP_NAMES[12], self.view_spatial.a.weight()),
            (GROUP_NAMES[13], self.view_spatial.a.bias()),
            (GROUP_NAMES[14], self.view_spatial.b.weight()),
            (GROUP_NAMES[15], self.view_spatial.b.bias()),
        ]
    }

    /// Mutable view of the same groups, same order as [`MoeParams::groups`].
    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::with_capacity(16);
        let (w, b) = self.mem_channel.l1.params_mut();
        out.push((GROUP_NAMES[0], w));
        out.push((GROUP_NAMES[1], b));
        let (w, b) = self.mem_channel.l2.params_mut();
        out.push((GROUP_NAMES[2], w));
        out.push((GROUP_NAMES[3], b));
        let (w, b) = self.view_channel.l1.params_mut();
        out.push((GROUP_NAMES[4], w));
        out.push((GROUP_NAMES[5], b));
        let (w, b) = self.view_channel.l2.params_mut();
        out.push((GROUP_NAMES[6], w));
        out.push((GROUP_NAMES[7], b));
        let (w, b) = self.mem_spatial.a.params_mut();
        out.push((GROUP_NAMES[8], w));
        out.push((GROUP_NAMES[9], b));
        let (w, b) = self.mem_spatial.b.params_mut();
        out.push((GROUP_NAMES[10], w));
        out.push((GROUP_NAMES[11], b));
        let (w, b) = self.view_spatial.a.params_mut();
        out.push((GROUP_NAMES[12], w));
        out.push((GROUP_NAMES[13], b));
        let (w, b) = self.view_spatial.b.params_mut();
        out.push((GROUP_NAMES[14], w));
        out.push((GROUP_NAMES[15], b));
        out
    }

    /// Order-sensitive fingerprint of shape and contents, used to detect a
    /// stale [`FuseCache`].
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for dim in [self.channels, self.hidden, self.spatial_hidden] {
            h = h.rotate_left(7) ^ (dim as u64);
        }
        for (_, slice) in self.groups() {
            for v in slice {
                h = h.rotate_left(7) ^ v.to_bits();
            }
        }
        h
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.channels != other.channels
            || self.hidden != other.hidden
            || self.spatial_hidden != other.spatial_hidden
        {
            return Err(Error::InvalidConfig { what: "parameter shapes differ" });
        }
        Ok(())
    }

    /// `self += scale * other`, group by group. Used to accumulate per-sample
    /// gradients into a batch gradient.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.same_shape(other)?;
        let theirs = other.groups();
        for ((_, mine), (_, other_slice)) in self.groups_mut().into_iter().zip(theirs) {
            for (m, o) in mine.iter_mut().zip(other_slice) {
                *m += scale * o;
            }
        }
        Ok(())
    }

    /// One gradient-descent step: `self -= learning_rate * grads`.
    pub fn apply_step(&mut self, grads: &Self, learning_rate: f64) -> Result<()> {
        self.add_scaled(grads, -learning_rate)
    }
}

fn fan_in_for(name: &str, channels: usize, hidden: usize, spatial_hidden: usize) -> usize {
    if name.contains(".l1.") {
        2 * channels
    } else if name.contains(".l2.") {
        hidden
    } else if name.contains(".a.") {
        2 * channels * 9
    } else {
        spatial_hidden * 9
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct FuseCache {
    digest: u64,
    f_mem: FeatureMap,
    f_view: FeatureMap,
    z: ChannelVector,
    mem_pre1: ChannelVector,
    mem_hidden: ChannelVector,
    mem_gate: ChannelVector,
    view_pre1: ChannelVector,
    view_hidden: ChannelVector,
    view_gate: ChannelVector,
    mod_mem: FeatureMap,
    mod_view: FeatureMap,
    u: FeatureMap,
    mem_spre: FeatureMap,
    mem_sact: FeatureMap,
    mem_smap: SpatialMap,
    view_spre: FeatureMap,
    view_sact: FeatureMap,
    view_smap: SpatialMap,
}

impl FuseCache {
    /// Channel gates for the memory and view inputs.
    pub fn channel_gates(&self) -> (&ChannelVector, &ChannelVector) {
        (&self.mem_gate, &self.view_gate)
    }

    /// Spatial gates for the memory and view inputs.
    pub fn spatial_gates(&self) -> (&SpatialMap, &SpatialMap) {
        (&self.mem_smap, &self.view_smap)
    }

    /// The channel-modulated intermediates.
    pub fn modulated(&self) -> (&FeatureMap, &FeatureMap) {
        (&self.mod_mem, &self.mod_view)
    }
}

/// Gradients of a scalar loss with respect to every parameter group (carried
/// as a [`MoeParams`] of matching shape) and both inputs.
#[derive(Debug, Clone)]
pub struct MoeGradients {
    pub params: MoeParams,
    pub d_f_mem: FeatureMap,
    pub d_f_view: FeatureMap,
}

fn channel_stack(router: &ChannelRouter, z: &ChannelVector) -> Result<(ChannelVector, ChannelVector, ChannelVector)> {
    let pre1 = router.l1.forward(z)?;
    let hidden = pre1.relu();
    let gate = router.l2.forward(&hidden)?.sigmoid();
    Ok((pre1, hidden, gate))
}

fn spatial_stack(router: &SpatialRouter, u: &FeatureMap) -> Result<(FeatureMap, FeatureMap, SpatialMap)> {
    let spre = router.a.forward(u)?;
    let sact = spre.relu();
    let sout = router.b.forward(&sact)?.sigmoid();
    let smap = SpatialMap::new(sout.h(), sout.w(), sout.data().to_vec())?;
    Ok((spre, sact, smap))
}

fn check_pair(f_mem: &FeatureMap, f_view: &FeatureMap, params: &MoeParams) -> Result<()> {
    f_mem.same_shape(f_view)?;
    if f_mem.c() != params.channels {
        return Err(Error::ChannelMismatch { expected: params.channels, got: f_mem.c() });
    }
    Ok(())
}

/// Channel gates for both inputs: pool the concatenated pair globally, then
/// run each input's two-layer MLP and squash with a sigmoid.
pub fn channel_route(
    f_mem: &FeatureMap,
    f_view: &FeatureMap,
    params: &MoeParams,
) -> Result<(ChannelVector, ChannelVector)> {
    check_pair(f_mem, f_view, params)?;
    let z = global_avg_pool(&concat_channels(f_mem, f_view)?);
    let (_, _, mem_gate) = channel_stack(&params.mem_channel, &z)?;
    let (_, _, view_gate) = channel_stack(&params.view_channel, &z)?;
    Ok((mem_gate, view_gate))
}

/// Residual channel modulation `gate ⊙ f + f`.
pub fn channel_modulate(f: &FeatureMap, gate: &ChannelVector) -> Result<FeatureMap> {
    add(&broadcast_mul_channel(f, gate)?, f)
}

/// Spatial gates for both (already channel-modulated) inputs.
pub fn spatial_route(
    mod_mem: &FeatureMap,
    mod_view: &FeatureMap,
    params: &MoeParams,
) -> Result<(SpatialMap, SpatialMap)> {
    check_pair(mod_mem, mod_view, params)?;
    let u = concat_channels(mod_mem, mod_view)?;
    let (_, _, mem_smap) = spatial_stack(&params.mem_spatial, &u)?;
    let (_, _, view_smap) = spatial_stack(&params.view_spatial, &u)?;
    Ok((mem_smap, view_smap))
}

/// Residual spatial modulation `gate ⊙ f + f`.
pub fn spatial_modulate(f: &FeatureMap, gate: &SpatialMap) -> Result<FeatureMap> {
    add(&broadcast_mul_spatial(f, gate)?, f)
}

/// Full fusion forward pass. Returns the fused map and the cache required
/// by [`fuse_backward`].
pub fn fuse(f_mem: &FeatureMap, f_view: &FeatureMap, params: &MoeParams) -> Result<(FeatureMap, FuseCache)> {
    check_pair(f_mem, f_view, params)?;
    let z = global_avg_pool(&concat_channels(f_mem, f_view)?);
    let (mem_pre1, mem_hidden, mem_gate) = channel_stack(&params.mem_channel, &z)?;
    let (view_pre1, view_hidden, view_gate) = channel_stack(&params.view_channel, &z)?;
    let mod_mem = channel_modulate(f_mem, &mem_gate)?;
    let mod_view = channel_modulate(f_view, &view_gate)?;
    let u = concat_channels(&mod_mem, &mod_view)?;
    let (mem_spre, mem_sact, mem_smap) = spatial_stack(&params.mem_spatial, &u)?;
    let (view_spre, view_sact, view_smap) = spatial_stack(&params.view_spatial, &u)?;
    let out = add(
        &spatial_modulate(&mod_mem, &mem_smap)?,
        &spatial_modulate(&mod_view, &view_smap)?,
    )?;
    let cache = FuseCache {
        digest: params.digest(),
        f_mem: f_mem.clone(),
        f_view: f_view.clone(),
        z,
        mem_pre1,
        mem_hidden,
        mem_gate,
        view_pre1,
        view_hidden,
        view_gate,
        mod_mem,
        mod_view,
        u,
        mem_spre,
        mem_sact,
        mem_smap,
        view_spre,
        view_sact,
        view_smap,
    };
    Ok((out, cache))
}

/// Forward pass without keeping the cache.
pub fn fuse_output(f_mem: &FeatureMap, f_view: &FeatureMap, params: &MoeParams) -> Result<FeatureMap> {
    fuse(f_mem, f_view, params).map(|(out, _)| out)
}

/// `d_y = W^T` pullback of a fully-connected layer: returns gradients with
/// respect to the input, the weight, and the bias.
fn linear_backward(layer: &Linear, x: &ChannelVector, d_y: &ChannelVector) -> (ChannelVector, Vec<f64>, Vec<f64>) {
    let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
    let mut d_x = vec![0.0; in_dim];
    let mut d_w = vec![0.0; out_dim * in_dim];
    let mut d_b = vec![0.0; out_dim];
    for o in 0..out_dim {
        let g = d_y.get(o);
        d_b[o] = g;
        let row = &layer.weight()[o * in_dim..(o + 1) * in_dim];
        for q in 0..in_dim {
            d_x[q] += row[q] * g;
            d_w[o * in_dim + q] = g * x.get(q);
        }
    }
    (ChannelVector::new(d_x).expect("gradients of finite values are finite"), d_w, d_b)
}

/// Reverse pass of [`Conv3x3::forward`]: the input gradient is the
/// correlation of `d_out` with the kernel flipped in both offsets
/// (scattered here rather than gathered), `d_w[o,q,di,dj]` accumulates
/// `d_out[o,i,j] * x[q, i+di-1, j+dj-1]`, and `d_b[o]` sums `d_out[o,·,·]`.
fn conv_backward(conv: &Conv3x3, x: &FeatureMap, d_out: &FeatureMap) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let (h, w) = (x.h(), x.w());
    let (in_c, out_c) = (conv.in_c(), conv.out_c());
    let mut d_x = vec![0.0; h * w * in_c];
    let mut d_w = vec![0.0; out_c * in_c * 9];
    let mut d_b = vec![0.0; out_c];
    for i in 0..h {
        for j in 0..w {
            for o in 0..out_c {
                let g = d_out.get(i, j, o);
                d_b[o] += g;
                for di in 0..3 {
                    let ii = (i + di).wrapping_sub(1);
                    if ii >= h {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = (j + dj).wrapping_sub(1);
                        if jj >= w {
                            continue;
                        }
                        let px_base = (ii * w + jj) * in_c;
                        for q in 0..in_c {
                            let wv = conv.weight()[((o * in_c + q) * 3 + di) * 3 + dj];
                            d_x[px_base + q] += wv * g;
                            d_w[((o * in_c + q) * 3 + di) * 3 + dj] += g * x.data()[px_base + q];
                        }
                    }
                }
            }
        }
    }
    let d_x = FeatureMap::new(h, w, in_c, d_x).expect("gradients of finite values are finite");
    (d_x, d_w, d_b)
}

/// ReLU pullback with the derivative at the kink taken as zero.
fn relu_backward_map(d: &FeatureMap, pre: &FeatureMap) -> FeatureMap {
    FeatureMap::from_fn(d.h(), d.w(), d.c(), |i, j, k| {
        if pre.get(i, j, k) > 0.0 {
            d.get(i, j, k)
        } else {
            0.0
        }
    })
    .expect("gradients of finite values are finite")
}

fn relu_backward_vec(d: &ChannelVector, pre: &ChannelVector) -> ChannelVector {
    let data = (0..d.len())
        .map(|k| if pre.get(k) > 0.0 { d.get(k) } else { 0.0 })
        .collect();
    ChannelVector::new(data).expect("gradients of finite values are finite")
}

struct BranchGrads {
    d_z: ChannelVector,
    d_w1: Vec<f64>,
    d_b1: Vec<f64>,
    d_w2: Vec<f64>,
    d_b2: Vec<f64>,
}

/// Backward through one channel router given the gradient at its gate.
fn channel_stack_backward(
    router: &ChannelRouter,
    z: &ChannelVector,
    pre1: &ChannelVector,
    hidden: &ChannelVector,
    gate: &ChannelVector,
    d_gate: &ChannelVector,
) -> BranchGrads {
    // Sigmoid pullback uses the cached output: s' = s * (1 - s).
    let d_pre2 = ChannelVector::new(
        (0..gate.len())
            .map(|k| {
                let s = gate.get(k);
                d_gate.get(k) * s * (1.0 - s)
            })
            .collect(),
    )
    .expect("gradients of finite values are finite");
    let (d_hidden, d_w2, d_b2) = linear_backward(&router.l2, hidden, &d_pre2);
    let d_pre1 = relu_backward_vec(&d_hidden, pre1);
    let (d_z, d_w1, d_b1) = linear_backward(&router.l1, z, &d_pre1);
    BranchGrads { d_z, d_w1, d_b1, d_w2, d_b2 }
}

struct SpatialBranchGrads {
    d_u: FeatureMap,
    d_wa: Vec<f64>,
    d_ba: Vec<f64>,
    d_wb: Vec<f64>,
    d_bb: Vec<f64>,
}

/// Backward through one spatial router given the gradient at its gate map.
fn spatial_stack_backward(
    router: &SpatialRouter,
    u: &FeatureMap,
    spre: &FeatureMap,
    sact: &FeatureMap,
    smap: &SpatialMap,
    d_smap: &SpatialMap,
) -> SpatialBranchGrads {
    let (h, w) = (smap.h(), smap.w());
    let d_sout = FeatureMap::from_fn(h, w, 1, |i, j, _| {
        let s = smap.get(i, j);
        d_smap.get(i, j) * s * (1.0 - s)
    })
    .expect("gradients of finite values are finite");
    let (d_sact, d_wb, d_bb) = conv_backward(&router.b, sact, &d_sout);
    let d_spre = relu_backward_map(&d_sact, spre);
    let (d_u, d_wa, d_ba) = conv_backward(&router.a, u, &d_spre);
    SpatialBranchGrads { d_u, d_wa, d_ba, d_wb, d_bb }
}

/// Exact reverse-mode gradients of a scalar loss through [`fuse`], given
/// the loss gradient `d_out` at the fused output. `cache` must come from a
/// forward pass with the same `params`; a digest mismatch is rejected.
pub fn fuse_backward(params: &MoeParams, cache: &FuseCache, d_out: &FeatureMap) -> Result<MoeGradients> {
    if cache.digest != params.digest() {
        return Err(Error::StaleCache { what: "parameters changed since the forward pass" });
    }
    d_out.same_shape(&cache.f_mem)?;
    let (h, w, c) = (d_out.h(), d_out.w(), d_out.c());

    // Output sum: the same upstream gradient reaches both modulated branches.
    // Spatial modulation out = g ⊙ f + f pulls back as
    //   d_f += d_out * (1 + g),  d_g[i,j] += sum_k d_out[i,j,k] * f[i,j,k].
    let mut d_mod_mem = FeatureMap::zeros(h, w, c)?;
    let mut d_mod_view = FeatureMap::zeros(h, w, c)?;
    let mut d_mem_smap = SpatialMap::zeros(h, w)?;
    let mut d_view_smap = SpatialMap::zeros(h, w)?;
    for i in 0..h {
        for j in 0..w {
            let mut acc_mem = 0.0;
            let mut acc_view = 0.0;
            for k in 0..c {
                let g = d_out.get(i, j, k);
                d_mod_mem.set(i, j, k, g * (1.0 + cache.mem_smap.get(i, j)));
                d_mod_view.set(i, j, k, g * (1.0 + cache.view_smap.get(i, j)));
                acc_mem += g * cache.mod_mem.get(i, j, k);
                acc_view += g * cache.mod_view.get(i, j, k);
            }
            d_mem_smap.set(i, j, acc_mem);
            d_view_smap.set(i, j, acc_view);
        }
    }

    let mem_spatial = spatial_stack_backward(
        &params.mem_spatial,
        &cache.u,
        &cache.mem_spre,
        &cache.mem_sact,
        &cache.mem_smap,
        &d_mem_smap,
    );
    let view_spatial = spatial_stack_backward(
        &params.view_spatial,
        &cache.u,
        &cache.view_spre,
        &cache.view_sact,
        &cache.view_smap,
        &d_view_smap,
    );

    // Both spatial routers read the same concatenation, so their input
    // gradients add; the halves then flow to the two modulated maps.
    let d_u = add(&mem_spatial.d_u, &view_spatial.d_u)?;
    d_mod_mem = add(&d_mod_mem, &slice_channels(&d_u, 0, c)?)?;
    d_mod_view = add(&d_mod_view, &slice_channels(&d_u, c, c)?)?;

    // Channel modulation pulls back the same way as the spatial one, with
    // the reduction running over locations instead of channels.
    let mut d_f_mem = FeatureMap::zeros(h, w, c)?;
    let mut d_f_view = FeatureMap::zeros(h, w, c)?;
    let mut d_mem_gate = ChannelVector::zeros(c)?;
    let mut d_view_gate = ChannelVector::zeros(c)?;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let gm = d_mod_mem.get(i, j, k);
                let gv = d_mod_view.get(i, j, k);
                d_f_mem.set(i, j, k, gm * (1.0 + cache.mem_gate.get(k)));
                d_f_view.set(i, j, k, gv * (1.0 + cache.view_gate.get(k)));
                d_mem_gate.set(k, d_mem_gate.get(k) + gm * cache.f_mem.get(i, j, k));
                d_view_gate.set(k, d_view_gate.get(k) + gv * cache.f_view.get(i, j, k));
            }
        }
    }

    let mem_channel = channel_stack_backward(
        &params.mem_channel,
        &cache.z,
        &cache.mem_pre1,
        &cache.mem_hidden,
        &cache.mem_gate,
        &d_mem_gate,
    );
    let view_channel = channel_stack_backward(
        &params.view_channel,
        &cache.z,
        &cache.view_pre1,
        &cache.view_hidden,
        &cache.view_gate,
        &d_view_gate,
    );

    // Average pool pullback spreads d_z / (h * w) to every location of the
    // concatenated input, whose halves are the two original inputs.
    let n = (h * w) as f64;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let dm = (mem_channel.d_z.get(k) + view_channel.d_z.get(k)) / n;
                let dv = (mem_channel.d_z.get(c + k) + view_channel.d_z.get(c + k)) / n;
                d_f_mem.set(i, j, k, d_f_mem.get(i, j, k) + dm);
                d_f_view.set(i, j, k, d_f_view.get(i, j, k) + dv);
            }
        }
    }

    let mut grads = MoeParams::zeros(params.channels, params.hidden, params.spatial_hidden)?;
    let filled: [(&'static str, Vec<f64>); 16] = [
        (GROUP_NAMES[0], mem_channel.d_w1),
        (GROUP_NAMES[1], mem_channel.d_b1),
        (GROUP_NAMES[2], mem_channel.d_w2),
        (GROUP_NAMES[3], mem_channel.d_b2),
        (GROUP_NAMES[4], view_channel.d_w1),
        (GROUP_NAMES[5], view_channel.d_b1),
        (GROUP_NAMES[6], view_channel.d_w2),
        (GROUP_NAMES[7], view_channel.d_b2),
        (GROUP_NAMES[8], mem_spatial.d_wa),
        (GROUP_NAMES[9], mem_spatial.d_ba),
        (GROUP_NAMES[10], mem_spatial.d_wb),
        (GROUP_NAMES[11], mem_spatial.d_bb),
        (GROUP_NAMES[12], view_spatial.d_wa),
        (GROUP_NAMES[13], view_spatial.d_ba),
        (GROUP_NAMES[14], view_spatial.d_wb),
        (GROUP_NAMES[15], view_spatial.d_bb),
    ];
    for ((name, dst), (src_name, src)) in grads.groups_mut().into_iter().zip(filled) {
        debug_assert_eq!(name, src_name);
        dst.copy_from_slice(&src);
    }
    Ok(MoeGradients { params: grads, d_f_mem, d_f_view })
}

fn dot_maps(a: &FeatureMap, b: &FeatureMap) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central finite differences of the probe loss `<upstream, fuse(...)>`
/// with respect to every parameter and both inputs.
pub fn fd_gradients(
    params: &MoeParams,
    f_mem: &FeatureMap,
    f_view: &FeatureMap,
    upstream: &FeatureMap,
    step: f64,
) -> Result<MoeGradients> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidConfig { what: "finite-difference step must be positive" });
    }
    check_pair(f_mem, f_view, params)?;
    upstream.same_shape(f_mem)?;

    let loss = |p: &MoeParams, fm: &FeatureMap, fv: &FeatureMap| -> Result<f64> {
        Ok(dot_maps(upstream, &fuse_output(fm, fv, p)?))
    };

    let mut grads = MoeParams::zeros(params.channels, params.hidden, params.spatial_hidden)?;
    let mut probe = params.clone();
    for gi in 0..16 {
        let len = params.groups()[gi].1.len();
        for idx in 0..len {
            let orig = params.groups()[gi].1[idx];
            probe.groups_mut()[gi].1[idx] = orig + step;
            let plus = loss(&probe, f_mem, f_view)?;
            probe.groups_mut()[gi].1[idx] = orig - step;
            let minus = loss(&probe, f_mem, f_view)?;
            probe.groups_mut()[gi].1[idx] = orig;
            grads.groups_mut()[gi].1[idx] = (plus - minus) / (2.0 * step);
        }
    }

    let fd_input = |which_mem: bool| -> Result<FeatureMap> {
        let base = if which_mem { f_mem } else { f_view };
        let mut moved = base.clone();
        let mut out = FeatureMap::zeros(base.h(), base.w(), base.c())?;
        for i in 0..base.h() {
            for j in 0..base.w() {
                for k in 0..base.c() {
                    let orig = base.get(i, j, k);
                    moved.set(i, j, k, orig + step);
                    let plus = if which_mem {
                        loss(params, &moved, f_view)?
                    } else {
                        loss(params, f_mem, &moved)?
                    };
                    moved.set(i, j, k, orig - step);
                    let minus = if which_mem {
                        loss(params, &moved, f_view)?
                    } else {
                        loss(params, f_mem, &moved)?
                    };
                    moved.set(i, j, k, orig);
                    out.set(i, j, k, (plus - minus) / (2.0 * step));
                }
            }
        }
        Ok(out)
    };
    let d_f_mem = fd_input(true)?;
    let d_f_view = fd_input(false)?;
    Ok(MoeGradients { params: grads, d_f_mem, d_f_view })
}

/// One row of a gradient-check report: a parameter group or one of the two
/// inputs, with its worst guarded relative error.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub max_err: f64,
    pub pass: bool,
}

/// Outcome of comparing analytic against finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_err(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| if r.max_err > m { r.max_err } else { m })
    }
}

/// Guarded relative error: `|a - b| / max(|a|, |b|, GRAD_ABS_FLOOR / tol)`,
/// so a row passes exactly when
/// `|a - b| <= max(GRAD_ABS_FLOOR, tol * max(|a|, |b|))`.
fn guarded_rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let m = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / m
}

/// Compare two gradient sets group by group (plus the two input gradients)
/// at relative tolerance `tol`.
pub fn compare_gradients(analytic: &MoeGradients, numeric: &MoeGradients, tol: f64) -> Result<GradCheckReport> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidConfig { what: "gradient tolerance must be positive" });
    }
    analytic.params.same_shape(&numeric.params)?;
    analytic.d_f_mem.same_shape(&numeric.d_f_mem)?;
    analytic.d_f_view.same_shape(&numeric.d_f_view)?;
    let floor = GRAD_ABS_FLOOR / tol;
    let mut rows = Vec::with_capacity(18);
    let theirs = numeric.params.groups();
    for ((name, a), (_, b)) in analytic.params.groups().into_iter().zip(theirs) {
        let max_err = a
            .iter()
            .zip(b)
            .fold(0.0_f64, |m, (&x, &y)| m.max(guarded_rel_err(x, y, floor)));
        rows.push(GradCheckRow { name, max_err, pass: max_err < tol });
    }
    for (name, a, b) in [
        ("d_f_mem", &analytic.d_f_mem, &numeric.d_f_mem),
        ("d_f_view", &analytic.d_f_view, &numeric.d_f_view),
    ] {
        let max_err = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0_f64, |m, (&x, &y)| m.max(guarded_rel_err(x, y, floor)));
        rows.push(GradCheckRow { name, max_err, pass: max_err < tol });
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(GradCheckReport { rows, tol, pass })
}

/// Configuration of one end-to-end gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub r: usize,
    pub s: usize,
    pub step: f64,
    pub tol: f64,
}

impl GradCheckConfig {
    /// Defaults: hidden widths 4, central-difference step 1e-5, relative
    /// tolerance 1e-4.
    pub fn new(seed: u64, h: usize, w: usize, c: usize) -> Self {
        Self { seed, h, w, c, r: 4, s: 4, step: 1e-5, tol: 1e-4 }
    }
}

/// Draw parameters, inputs, and an upstream gradient from `seed`, then
/// compare [`fuse_backward`] against [`fd_gradients`].
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = MoeParams::random(cfg.c, cfg.r, cfg.s, &mut rng)?;
    let f_mem = FeatureMap::random(cfg.h, cfg.w, cfg.c, -1.0, 1.0, &mut rng)?;
    let f_view = FeatureMap::random(cfg.h, cfg.w, cfg.c, -1.0, 1.0, &mut rng)?;
    let upstream = FeatureMap::random(cfg.h, cfg.w, cfg.c, -1.0, 1.0, &mut rng)?;
    let (_, cache) = fuse(&f_mem, &f_view, &params)?;
    let analytic = fuse_backward(&params, &cache, &upstream)?;
    let numeric = fd_gradients(&params, &f_mem, &f_view, &upstream, cfg.step)?;
    compare_gradients(&analytic, &numeric, cfg.tol)
}
