//! Shared 2D convolutional backbone over pseudo-images.
//!
//! Two 3x3 stem convolutions, four residual blocks with optional 2x max-pool
//! after each, then a two-scale merge: the final map goes through a 1x1
//! projection, and a pooled copy goes through its own 1x1 projection and is
//! up-sampled back before the add. Weights are shared across every frame of
//! a sequence.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const NUM_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub width: usize,
    pub out_channels: usize,
    pub stem_stride: usize,
    pub pool_after: [bool; NUM_BLOCKS],
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            in_channels: 32,
            width: 32,
            out_channels: 64,
            stem_stride: 1,
            pool_after: [true, true, true, false],
        }
    }

    /// Full-scale variant: strided stem and a pool after every block, for a
    /// total spatial reduction of 32x.
    pub fn full_scale() -> Self {
        BackboneConfig {
            in_channels: 64,
            width: 64,
            out_channels: 256,
            stem_stride: 2,
            pool_after: [true, true, true, true],
        }
    }

    /// Output dims for a given input, mirroring the forward pass exactly.
    pub fn output_shape(&self, h0: usize, w0: usize) -> Result<(usize, usize, usize)> {
        let mut h = kernels::conv_out_extent(h0, 3, self.stem_stride, 1)
            .ok_or_else(|| Error::shape("backbone", "input too small for stem"))?;
        let mut w = kernels::conv_out_extent(w0, 3, self.stem_stride, 1)
            .ok_or_else(|| Error::shape("backbone", "input too small for stem"))?;
        for &pool in &self.pool_after {
            if pool {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("backbone", format!("cannot pool odd extent {h}x{w}")));
                }
                h /= 2;
                w /= 2;
            }
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("backbone", "merge needs even final extents"));
        }
        Ok((self.out_channels, h, w))
    }
}

fn conv_layer<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: VarId,
    prefix: &str,
    stride: usize,
    pad: usize,
) -> Result<VarId> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.add_bias_channels(y, b)
}

/// Two 3x3 convs with a skip connection. Zero weights and biases make this
/// the identity.
pub fn res_block<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    x: VarId,
    prefix: &str,
) -> Result<VarId> {
    let y = conv_layer(tape, store, x, &format!("{prefix}.conv1"), 1, 1)?;
    let y = tape.relu(y)?;
    let y = conv_layer(tape, store, y, &format!("{prefix}.conv2"), 1, 1)?;
    tape.add(x, y)
}

pub fn backbone_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    pseudo: VarId,
    cfg: &BackboneConfig,
) -> Result<VarId> {
    let d = tape.dims(pseudo).to_vec();
    if d.len() != 3 || d[0] != cfg.in_channels {
        return Err(Error::shape(
            "backbone",
            format!("expected [{}, h, w] input, got {d:?}", cfg.in_channels),
        ));
    }
    cfg.output_shape(d[1], d[2])?;
    let x = conv_layer(tape, store, pseudo, "backbone.stem1", cfg.stem_stride, 1)?;
    let x = tape.relu(x)?;
    let x = conv_layer(tape, store, x, "backbone.stem2", 1, 1)?;
    let mut x = tape.relu(x)?;
    for (i, &pool) in cfg.pool_after.iter().enumerate() {
        x = res_block(tape, store, x, &format!("backbone.block{i}"))?;
        if pool {
            x = tape.maxpool2d(x, 2)?;
        }
    }
    let fine = conv_layer(tape, store, x, "backbone.merge_fine", 1, 0)?;
    let pooled = tape.maxpool2d(x, 2)?;
    let coarse = conv_layer(tape, store, pooled, "backbone.merge_coarse", 1, 0)?;
    let coarse = tape.upsample2x(coarse)?;
    tape.add(fine, coarse)
}

pub fn register_backbone_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &BackboneConfig,
    seed: u64,
) -> Result<()> {
    let conv = |store: &mut ParamStore<S>, name: &str, cout: usize, cin: usize, k: usize| -> Result<()> {
        store.init_kaiming(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, seed)?;
        store.init_zeros(&format!("{name}.b"), &[cout])
    };
    conv(store, "backbone.stem1", cfg.width, cfg.in_channels, 3)?;
    conv(store, "backbone.stem2", cfg.width, cfg.width, 3)?;
    for i in 0..NUM_BLOCKS {
        conv(store, &format!("backbone.block{i}.conv1"), cfg.width, cfg.width, 3)?;
        conv(store, &format!("backbone.block{i}.conv2"), cfg.width, cfg.width, 3)?;
    }
    conv(store, "backbone.merge_fine", cfg.out_channels, cfg.width, 1)?;
    conv(store, "backbone.merge_coarse", cfg.out_channels, cfg.width, 1)?;
    Ok(())
}
