//! Two-pass shared-weight encoding: a causal first pass and a re-encode pass
//! in which each completed segment sees its whole word range, then fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::mask::{build_causal_mask, build_reencode_once_mask, AttentionMask};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transformer::{Linear, TransformerStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Add,
    ConcatProject,
    ReencodeOnly,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(FusionMode::Add),
            "concat_project" => Ok(FusionMode::ConcatProject),
            "reencode_only" => Ok(FusionMode::ReencodeOnly),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Add => "add",
            FusionMode::ConcatProject => "concat_project",
            FusionMode::ReencodeOnly => "reencode_only",
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncodedStream {
    pub first_pass: Tensor,
    pub reencoded: Option<Tensor>,
    pub fused: Option<Tensor>,
    pub boundaries: Option<BoundarySet>,
}

impl EncodedStream {
    /// What the text decoder attends to.
    pub fn memory(&self) -> &Tensor {
        self.fused.as_ref().unwrap_or(&self.first_pass)
    }
}

fn run(stack: &TransformerStack, params: &ParamStore, x: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let mut g = Graph::with_params(params);
    let xv = g.constant(x.clone());
    let out = stack.encode_with_mask(&mut g, xv, mask, 0.0)?;
    Ok(g.value(out).clone())
}

fn check_stream(x: &Tensor, stack: &TransformerStack) -> Result<usize> {
    let (n, d) = x.require_matrix("feature stream")?;
    if d != stack.d {
        return Err(Error::Shape(format!("stream width {d} for encoder width {}", stack.d)));
    }
    Ok(n)
}

/// First pass under the causal mask. `x` holds embedded frames.
pub fn encode_stream(stack: &TransformerStack, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let n = check_stream(x, stack)?;
    run(stack, params, x, &build_causal_mask(n))
}

/// Bidirectional encoding (teacher mode).
pub fn encode_full(stack: &TransformerStack, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let n = check_stream(x, stack)?;
    run(stack, params, x, &AttentionMask::full(n, n))
}

/// Second pass with the same parameters under the re-encode-once mask.
pub fn reencode_once(
    stack: &TransformerStack,
    params: &ParamStore,
    x: &Tensor,
    boundaries: &BoundarySet,
) -> Result<Tensor> {
    let n = check_stream(x, stack)?;
    run(stack, params, x, &build_reencode_once_mask(boundaries, n)?)
}

pub fn fuse(
    first: &Tensor,
    reencoded: &Tensor,
    mode: FusionMode,
    projection: &Linear,
    params: &ParamStore,
) -> Result<Tensor> {
    let mut g = Graph::with_params(params);
    let a = g.constant(first.clone());
    let b = g.constant(reencoded.clone());
    let out = fuse_graph(&mut g, a, b, mode, projection)?;
    Ok(g.value(out).clone())
}

/// Graph form of [`fuse`]; `projection` maps `2d → d` and is used only by
/// [`FusionMode::ConcatProject`].
pub fn fuse_graph(g: &mut Graph, first: Var, reencoded: Var, mode: FusionMode, projection: &Linear) -> Result<Var> {
    if g.value(first).shape() != g.value(reencoded).shape() {
        return Err(Error::Shape(format!(
            "fusing {:?} with {:?}",
            g.value(first).shape(),
            g.value(reencoded).shape()
        )));
    }
    match mode {
        FusionMode::Add => g.add(first, reencoded),
        FusionMode::ReencodeOnly => Ok(reencoded),
        FusionMode::ConcatProject => {
            let cat = g.concat_cols(&[first, reencoded])?;
            projection.forward(g, cat)
        }
    }
}
