//! Full model parameters and the end-to-end scene pass:
//! points → pillars → tokens → backbone → dense map → hole filling → head.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};

use crate::attention::{AttentionTrace, SraBlockParams};
use crate::backbone::{sst_forward, ForwardOptions, SstConfig, ATTENTIONS_PER_BLOCK};
use crate::complexity::FlopLedger;
use crate::densify::{conv2d, scatter_to_dense, ConvParams, DenseMap};
use crate::error::{config_err, Result, SstError};
use crate::head::{predict, HeadParams};
use crate::io::TensorMap;
use crate::real::Real;
use crate::rng::XorShift64Star;
use crate::voxelizer::{
    assign_pillars, encode_pillars, GridConfig, PillarEncoderParams, PointCloud, TokenSet, POINT_FEATURES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub num_blocks: usize,
    pub channels: usize,
    pub heads: usize,
    pub hidden: usize,
    pub anchors_per_cell: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { num_blocks: 6, channels: 128, heads: 8, hidden: 256, anchors_per_cell: 4 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.hidden == 0 || self.anchors_per_cell == 0 {
            return Err(config_err!("channels, heads, hidden and anchors per cell must be positive"));
        }
        if !self.channels.is_multiple_of(self.heads) {
            return Err(config_err!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if !self.channels.is_multiple_of(4) {
            return Err(config_err!("channels {} not divisible by 4 (positional encoding)", self.channels));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SstParams<T> {
    pub pillar: PillarEncoderParams<T>,
    /// Block b uses modules 2b (plain) and 2b + 1 (shifted).
    pub modules: Vec<SraBlockParams<T>>,
    pub neck: ConvParams<T>,
    pub head: HeadParams<T>,
}

fn module_prefix(index: usize) -> String {
    let half = if index.is_multiple_of(ATTENTIONS_PER_BLOCK) { "plain" } else { "shifted" };
    format!("block{:02}.{half}", index / ATTENTIONS_PER_BLOCK)
}

impl<T: Real> SstParams<T> {
    pub fn zeros(dims: &ModelDims) -> Self {
        let c = dims.channels;
        Self {
            pillar: PillarEncoderParams { weight: Array2::zeros((POINT_FEATURES, c)), bias: Array1::zeros(c) },
            modules: (0..dims.num_blocks * ATTENTIONS_PER_BLOCK)
                .map(|_| SraBlockParams::zeros(c, dims.hidden, dims.heads))
                .collect(),
            neck: ConvParams::zeros(c),
            head: HeadParams::zeros(c, dims.anchors_per_cell),
        }
    }

    pub fn random(dims: &ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = XorShift64Star::new(seed);
        let c = dims.channels;
        let a = (6.0 / (POINT_FEATURES + c) as f64).sqrt();
        let mut pillar = PillarEncoderParams { weight: Array2::zeros((POINT_FEATURES, c)), bias: Array1::zeros(c) };
        pillar.weight.mapv_inplace(|_| T::of(rng.uniform(-a, a)));
        let modules = (0..dims.num_blocks * ATTENTIONS_PER_BLOCK)
            .map(|_| SraBlockParams::random(c, dims.hidden, dims.heads, &mut rng))
            .collect();
        let neck = ConvParams::random(c, &mut rng);
        let head = HeadParams::random(c, dims.anchors_per_cell, &mut rng);
        Ok(Self { pillar, modules, neck, head })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_blocks: self.modules.len() / ATTENTIONS_PER_BLOCK,
            channels: self.pillar.channels(),
            heads: self.modules.first().map_or(1, |m| m.heads),
            hidden: self.modules.first().map_or(1, |m| m.hidden()),
            anchors_per_cell: self.head.anchors_per_cell(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![
            ("pillar.weight".to_string(), self.pillar.weight.view().into_dyn()),
            ("pillar.bias".to_string(), self.pillar.bias.view().into_dyn()),
        ];
        for (i, m) in self.modules.iter().enumerate() {
            let prefix = module_prefix(i);
            out.extend(m.tensors().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend([
            ("neck.conv1.weight".to_string(), self.neck.w1.view().into_dyn()),
            ("neck.conv1.bias".to_string(), self.neck.b1.view().into_dyn()),
            ("neck.conv2.weight".to_string(), self.neck.w2.view().into_dyn()),
            ("neck.conv2.bias".to_string(), self.neck.b2.view().into_dyn()),
            ("head.weight".to_string(), self.head.weight.view().into_dyn()),
            ("head.bias".to_string(), self.head.bias.view().into_dyn()),
        ]);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![
            ("pillar.weight".to_string(), self.pillar.weight.view_mut().into_dyn()),
            ("pillar.bias".to_string(), self.pillar.bias.view_mut().into_dyn()),
        ];
        for (i, m) in self.modules.iter_mut().enumerate() {
            let prefix = module_prefix(i);
            out.extend(m.tensors_mut().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out.extend([
            ("neck.conv1.weight".to_string(), self.neck.w1.view_mut().into_dyn()),
            ("neck.conv1.bias".to_string(), self.neck.b1.view_mut().into_dyn()),
            ("neck.conv2.weight".to_string(), self.neck.w2.view_mut().into_dyn()),
            ("neck.conv2.bias".to_string(), self.neck.b2.view_mut().into_dyn()),
            ("head.weight".to_string(), self.head.weight.view_mut().into_dyn()),
            ("head.bias".to_string(), self.head.bias.view_mut().into_dyn()),
        ]);
        out
    }

    pub fn to_tensors(&self) -> TensorMap {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.mapv(|v| v.f64() as f32))).collect()
    }

    /// Every expected tensor must be present with the expected shape; extra
    /// tensors are rejected.
    pub fn from_tensors(tensors: &TensorMap, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut params = Self::zeros(dims);
        let mut used = 0;
        for (name, mut slot) in params.named_tensors_mut() {
            let t = tensors.get(&name).ok_or_else(|| SstError::Format(format!("weights lack tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(SstError::Format(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(SstError::Format(format!("tensor {name} holds non-finite values")));
            }
            slot.zip_mut_with(t, |s, &v| *s = T::of(v as f64));
            used += 1;
        }
        if used != tensors.len() {
            let expected: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
            let extra = tensors.keys().find(|k| !expected.contains(k)).cloned().unwrap_or_default();
            return Err(SstError::Format(format!("weights hold unexpected tensor {extra}")));
        }
        Ok(params)
    }

    pub fn cast<U: Real>(&self) -> SstParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::of(v.f64()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::of(v.f64()));
        SstParams {
            pillar: PillarEncoderParams { weight: c2(&self.pillar.weight), bias: c1(&self.pillar.bias) },
            modules: self.modules.iter().map(SraBlockParams::cast).collect(),
            neck: ConvParams {
                w1: self.neck.w1.mapv(|v| U::of(v.f64())),
                b1: c1(&self.neck.b1),
                w2: self.neck.w2.mapv(|v| U::of(v.f64())),
                b2: c1(&self.neck.b2),
            },
            head: HeadParams { weight: c2(&self.head.weight), bias: c1(&self.head.bias) },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneOutput<T> {
    pub input_tokens: TokenSet<T>,
    pub tokens: TokenSet<T>,
    pub dense: DenseMap<T>,
    /// (anchors, 9) raw head outputs in anchor order.
    pub head: Array2<T>,
    pub dropped_points: usize,
    pub trace: Option<AttentionTrace>,
    pub ledger: FlopLedger,
}

pub fn encode_scene<T: Real>(
    cloud: &PointCloud,
    grid: &GridConfig,
    params: &PillarEncoderParams<T>,
    ledger: Option<&mut FlopLedger>,
) -> Result<(TokenSet<T>, usize)> {
    let pillars = assign_pillars(cloud, grid)?;
    let tokens = encode_pillars(&pillars, params, ledger)?;
    Ok((tokens, pillars.dropped))
}

pub fn run_scene<T: Real>(
    cloud: &PointCloud,
    grid: &GridConfig,
    backbone: &SstConfig,
    params: &SstParams<T>,
    trace_module: Option<usize>,
) -> Result<SceneOutput<T>> {
    let mut ledger = FlopLedger::default();
    let (input_tokens, dropped_points) = encode_scene(cloud, grid, &params.pillar, Some(&mut ledger))?;
    let out = sst_forward(&input_tokens, backbone, &params.modules, ForwardOptions { retain: false, trace_module })?;
    ledger += out.ledger;
    let map = scatter_to_dense(&out.tokens, grid)?;
    let dense = conv2d(&map, &params.neck, Some(&mut ledger))?;
    let head = predict(&dense, &params.head, Some(&mut ledger))?;
    Ok(SceneOutput { input_tokens, tokens: out.tokens, dense, head, dropped_points, trace: out.trace, ledger })
}
