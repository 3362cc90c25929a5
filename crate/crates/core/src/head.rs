//! Anchor-based detection head: anchors, target matching, the three loss
//! terms, residual box coding and score/NMS decoding.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};

use crate::complexity::FlopLedger;
use crate::densify::DenseMap;
use crate::error::{arg_err, config_err, Result};
use crate::geometry::{nms_bev, rotated_iou_bev, wrap_angle, Box3d};
use crate::linalg::linear;
use crate::real::Real;
use crate::rng::XorShift64Star;
use crate::voxelizer::{Cell, GridConfig};

pub const BOX_DIMS: usize = 7;
/// Per anchor: class logit, seven box residuals, direction logit.
pub const OUTPUTS_PER_ANCHOR: usize = 2 + BOX_DIMS;
pub const DIR_OUTPUT: usize = 1 + BOX_DIMS;

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorClass {
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub z_center: f64,
    pub match_iou: f64,
    pub unmatch_iou: f64,
}

impl AnchorClass {
    pub fn vehicle() -> Self {
        Self {
            name: "vehicle".into(),
            length: 4.7,
            width: 2.1,
            height: 1.7,
            z_center: 0.0,
            match_iou: 0.55,
            unmatch_iou: 0.4,
        }
    }

    pub fn pedestrian() -> Self {
        Self {
            name: "pedestrian".into(),
            length: 0.9,
            width: 0.9,
            height: 1.7,
            z_center: -0.1,
            match_iou: 0.5,
            unmatch_iou: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(config_err!("anchor class name {:?} must be a non-empty identifier", self.name));
        }
        for (what, v) in [("length", self.length), ("width", self.width), ("height", self.height)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err!("anchor {what} for {} must be positive, got {v}", self.name));
            }
        }
        if !self.z_center.is_finite() {
            return Err(config_err!("anchor z for {} is not finite", self.name));
        }
        if !(0.0 <= self.unmatch_iou && self.unmatch_iou < self.match_iou && self.match_iou <= 1.0) {
            return Err(config_err!(
                "{}: need 0 <= unmatch < match <= 1, got {} / {}",
                self.name,
                self.unmatch_iou,
                self.match_iou
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub classes: Vec<AnchorClass>,
    pub yaws: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { classes: vec![AnchorClass::vehicle(), AnchorClass::pedestrian()], yaws: vec![0.0, FRAC_PI_2] }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.yaws.is_empty() {
            return Err(config_err!("need at least one anchor class and one yaw"));
        }
        if let Some(y) = self.yaws.iter().find(|y| !y.is_finite()) {
            return Err(config_err!("anchor yaw {y} is not finite"));
        }
        self.classes.iter().try_for_each(AnchorClass::validate)
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: Box3d,
    pub class: usize,
}

/// One anchor per cell centre, class and yaw, ordered by (iy, ix, class, yaw).
pub fn generate_anchors(grid: &GridConfig, cfg: &AnchorConfig) -> Result<Vec<Anchor>> {
    grid.validate()?;
    cfg.validate()?;
    let (nx, ny) = (grid.nx() as u32, grid.ny() as u32);
    let mut anchors = Vec::with_capacity(grid.num_cells() * cfg.anchors_per_cell());
    for iy in 0..ny {
        for ix in 0..nx {
            let (cx, cy) = grid.cell_center(Cell::new(ix, iy));
            for (class, a) in cfg.classes.iter().enumerate() {
                for &yaw in &cfg.yaws {
                    let bbox = Box3d::new(cx, cy, a.z_center, a.length, a.width, a.height, yaw)?;
                    anchors.push(Anchor { bbox, class });
                }
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub bbox: Box3d,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignore,
}

impl Label {
    /// Classification target; `None` for ignored anchors.
    pub fn target(self) -> Option<bool> {
        match self {
            Label::Positive(_) => Some(true),
            Label::Negative => Some(false),
            Label::Ignore => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub labels: Vec<Label>,
    /// Residual targets; zero for non-positive anchors.
    pub targets: Vec<[f64; BOX_DIMS]>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, Label::Positive(_))).count()
    }
}

/// Residual coding relative to an anchor.
pub fn encode_box(anchor: &Box3d, gt: &Box3d) -> [f64; BOX_DIMS] {
    let (a, g) = (&anchor.bev, &gt.bev);
    let diag = a.length.hypot(a.width);
    [
        (g.cx - a.cx) / diag,
        (g.cy - a.cy) / diag,
        (gt.cz - anchor.cz) / anchor.height,
        (g.length / a.length).ln(),
        (g.width / a.width).ln(),
        (gt.height / anchor.height).ln(),
        g.yaw - a.yaw,
    ]
}

pub fn decode_box(anchor: &Box3d, d: &[f64]) -> Result<Box3d> {
    if d.len() != BOX_DIMS {
        return Err(arg_err!("expected {BOX_DIMS} residuals, got {}", d.len()));
    }
    let a = &anchor.bev;
    let diag = a.length.hypot(a.width);
    Box3d::new(
        a.cx + d[0] * diag,
        a.cy + d[1] * diag,
        anchor.cz + d[2] * anchor.height,
        a.length * d[3].exp(),
        a.width * d[4].exp(),
        anchor.height * d[5].exp(),
        a.yaw + d[6],
    )
}

pub fn decode_boxes(anchors: &[Anchor], deltas: ArrayView2<'_, f64>) -> Result<Vec<Box3d>> {
    if deltas.dim() != (anchors.len(), BOX_DIMS) {
        return Err(arg_err!("deltas shape {:?} does not match {} anchors", deltas.dim(), anchors.len()));
    }
    anchors.iter().zip(deltas.rows()).map(|(a, d)| decode_box(&a.bbox, &d.to_vec())).collect()
}

/// Threshold matching plus the per-gt argmax rule: every gt that overlaps
/// any same-class anchor gets at least one positive (lowest index on ties).
pub fn assign_targets(anchors: &[Anchor], gt: &[GtBox], cfg: &AnchorConfig) -> Result<TargetAssignment> {
    cfg.validate()?;
    if let Some(g) = gt.iter().find(|g| g.class >= cfg.classes.len()) {
        return Err(arg_err!("gt class {} out of range for {} classes", g.class, cfg.classes.len()));
    }
    let mut labels = vec![Label::Negative; anchors.len()];
    let mut best_for_gt: Vec<Option<(f64, usize)>> = vec![None; gt.len()];
    let radii: Vec<f64> = gt.iter().map(|g| g.bbox.bev.circumradius()).collect();
    for (i, anchor) in anchors.iter().enumerate() {
        let class = &cfg.classes[anchor.class];
        let a = &anchor.bbox.bev;
        let ra = a.circumradius();
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gt.iter().enumerate() {
            if g.class != anchor.class {
                continue;
            }
            let b = &g.bbox.bev;
            if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + radii[j] {
                continue;
            }
            let iou = rotated_iou_bev(a, b);
            if iou <= 0.0 {
                continue;
            }
            if best.is_none_or(|(m, _)| iou > m) {
                best = Some((iou, j));
            }
            if best_for_gt[j].is_none_or(|(m, _)| iou > m) {
                best_for_gt[j] = Some((iou, i));
            }
        }
        labels[i] = match best {
            Some((m, j)) if m >= class.match_iou => Label::Positive(j),
            Some((m, _)) if m >= class.unmatch_iou => Label::Ignore,
            _ => Label::Negative,
        };
    }
    for (j, best) in best_for_gt.iter().enumerate() {
        if let Some((_, i)) = *best {
            labels[i] = Label::Positive(j);
        }
    }
    let targets = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| match l {
            Label::Positive(j) => encode_box(&a.bbox, &gt[*j].bbox),
            _ => [0.0; BOX_DIMS],
        })
        .collect();
    Ok(TargetAssignment { labels, targets })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    -(x.max(0.0) - x + (-x.abs()).exp().ln_1p())
}

/// Binary cross-entropy on a logit.
pub fn bce_with_logits(x: f64, positive: bool) -> f64 {
    -log_sigmoid(if positive { x } else { -x })
}

/// Mean focal loss over non-ignored anchors. `alpha = None` weights both
/// classes by one.
pub fn focal_loss(logits: &[f64], targets: &[Option<bool>], alpha: Option<f64>, gamma: f64) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(arg_err!("{} logits but {} targets", logits.len(), targets.len()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&x, t) in logits.iter().zip(targets) {
        let Some(pos) = *t else { continue };
        let signed = if pos { x } else { -x };
        let log_pt = log_sigmoid(signed);
        let alpha_t = match alpha {
            Some(a) if pos => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        };
        let modulator = if gamma == 0.0 { 1.0 } else { (1.0 - log_pt.exp()).powf(gamma) };
        sum -= alpha_t * modulator * log_pt;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Summed smooth-L1 over all elements.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(arg_err!("{} predictions but {} targets", pred.len(), target.len()));
    }
    if !(beta > 0.0) {
        return Err(arg_err!("smooth-L1 beta must be positive, got {beta}"));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum())
}

/// Sign bin of a yaw: true when the wrapped angle is ≥ 0.
pub fn direction_bin(yaw: f64) -> bool {
    wrap_angle(yaw) >= 0.0
}

/// Summed binary cross-entropy on the yaw sign bin.
pub fn direction_loss(logits: &[f64], target_yaws: &[f64]) -> Result<f64> {
    if logits.len() != target_yaws.len() {
        return Err(arg_err!("{} logits but {} yaws", logits.len(), target_yaws.len()));
    }
    Ok(logits.iter().zip(target_yaws).map(|(&x, &y)| bce_with_logits(x, direction_bin(y))).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { loc: 2.0, cls: 1.0, dir: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("loc", self.loc), ("cls", self.cls), ("dir", self.dir)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err!("loss weight {what} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub loc: f64,
    pub cls: f64,
    pub dir: f64,
}

/// Weighted sum divided by `max(n_positive, 1)`.
pub fn total_loss(parts: LossParts, weights: LossWeights, n_positive: usize) -> f64 {
    (weights.loc * parts.loc + weights.cls * parts.cls + weights.dir * parts.dir) / n_positive.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), focal_alpha: 0.25, focal_gamma: 2.0, smooth_l1_beta: 1.0 / 9.0 }
    }
}

/// Loss terms for one scene from raw head outputs `(anchors, 9)`.
pub fn scene_loss(
    outputs: ArrayView2<'_, f64>,
    anchors: &[Anchor],
    assignment: &TargetAssignment,
    cfg: &LossConfig,
) -> Result<(LossParts, f64)> {
    cfg.weights.validate()?;
    if outputs.dim() != (anchors.len(), OUTPUTS_PER_ANCHOR) || assignment.labels.len() != anchors.len() {
        return Err(arg_err!("head outputs {:?} do not match {} anchors", outputs.dim(), anchors.len()));
    }
    let logits: Vec<f64> = outputs.column(0).to_vec();
    let targets: Vec<Option<bool>> = assignment.labels.iter().map(|l| l.target()).collect();
    let cls = focal_loss(&logits, &targets, Some(cfg.focal_alpha), cfg.focal_gamma)?;
    let (mut pred, mut target, mut dir_logits, mut dir_yaws) = (vec![], vec![], vec![], vec![]);
    for (i, label) in assignment.labels.iter().enumerate() {
        if let Label::Positive(_) = label {
            let row = outputs.row(i);
            pred.extend((1..=BOX_DIMS).map(|k| row[k]));
            target.extend_from_slice(&assignment.targets[i]);
            dir_logits.push(row[DIR_OUTPUT]);
            dir_yaws.push(anchors[i].bbox.bev.yaw + assignment.targets[i][6]);
        }
    }
    let parts = LossParts {
        loc: smooth_l1(&pred, &target, cfg.smooth_l1_beta)?,
        cls,
        dir: direction_loss(&dir_logits, &dir_yaws)?,
    };
    Ok((parts, total_loss(parts, cfg.weights, dir_logits.len())))
}

/// 1x1 convolution from the dense map to per-anchor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// (C, anchors_per_cell * 9)
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(channels: usize, anchors_per_cell: usize) -> Self {
        let out = anchors_per_cell * OUTPUTS_PER_ANCHOR;
        Self { weight: Array2::zeros((channels, out)), bias: Array1::zeros(out) }
    }

    /// Small weights; class logits start at a 1% foreground prior.
    pub fn random(channels: usize, anchors_per_cell: usize, rng: &mut XorShift64Star) -> Self {
        let mut p = Self::zeros(channels, anchors_per_cell);
        p.weight.mapv_inplace(|_| T::of(0.01 * rng.normal()));
        let prior = -(0.99f64 / 0.01).ln();
        for a in 0..anchors_per_cell {
            p.bias[a * OUTPUTS_PER_ANCHOR] = T::of(prior);
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.weight.nrows()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.weight.ncols() / OUTPUTS_PER_ANCHOR
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.weight.ncols();
        if out == 0 || !out.is_multiple_of(OUTPUTS_PER_ANCHOR) || self.bias.len() != out {
            return Err(config_err!("head outputs must be a positive multiple of {OUTPUTS_PER_ANCHOR}, got {out}"));
        }
        Ok(())
    }
}

/// Per-anchor outputs `(ny * nx * anchors_per_cell, 9)` in anchor order.
pub fn predict<T: Real>(map: &DenseMap<T>, head: &HeadParams<T>, ledger: Option<&mut FlopLedger>) -> Result<Array2<T>> {
    head.validate()?;
    if map.channels() != head.channels() {
        return Err(config_err!("map has {} channels, head expects {}", map.channels(), head.channels()));
    }
    let x = map.to_channels_last();
    let y = linear(x.view(), head.weight.view(), head.bias.view());
    if let Some(l) = ledger {
        l.head += (x.nrows() * head.channels() * head.weight.ncols()) as u64;
    }
    let rows = x.nrows() * head.anchors_per_cell();
    Ok(y.into_shape_with_order((rows, OUTPUTS_PER_ANCHOR)).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3d,
    pub score: f64,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_threshold: 0.1, pre_nms_top_k: 1000, nms_iou: 0.5 }
    }
}

/// Score threshold, top-k, decode with direction flip, then per-class NMS.
/// Result is sorted by descending score.
pub fn decode_detections(
    outputs: ArrayView2<'_, f64>,
    anchors: &[Anchor],
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    if outputs.dim() != (anchors.len(), OUTPUTS_PER_ANCHOR) {
        return Err(arg_err!("head outputs {:?} do not match {} anchors", outputs.dim(), anchors.len()));
    }
    let mut candidates: Vec<(f64, usize)> = outputs
        .column(0)
        .iter()
        .enumerate()
        .map(|(i, &x)| (sigmoid(x), i))
        .filter(|(s, _)| *s >= cfg.score_threshold)
        .collect();
    if let Some((_, i)) = candidates.iter().find(|(s, _)| !s.is_finite()) {
        return Err(arg_err!("class logit of anchor {i} is not finite"));
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    candidates.truncate(cfg.pre_nms_top_k);
    let mut decoded = Vec::with_capacity(candidates.len());
    for &(score, i) in &candidates {
        let row = outputs.row(i);
        let deltas: Vec<f64> = (1..=BOX_DIMS).map(|k| row[k]).collect();
        let mut bbox = decode_box(&anchors[i].bbox, &deltas)?;
        if direction_bin(bbox.bev.yaw) != (row[DIR_OUTPUT] >= 0.0) {
            bbox.bev.yaw = wrap_angle(bbox.bev.yaw + std::f64::consts::PI);
        }
        decoded.push(Detection { bbox, score, class: anchors[i].class });
    }
    let classes = anchors.iter().map(|a| a.class + 1).max().unwrap_or(0);
    let mut kept = Vec::new();
    for class in 0..classes {
        let members: Vec<&Detection> = decoded.iter().filter(|d| d.class == class).collect();
        let boxes: Vec<_> = members.iter().map(|d| d.bbox.bev).collect();
        let scores: Vec<f64> = members.iter().map(|d| d.score).collect();
        kept.extend(nms_bev(&boxes, &scores, cfg.nms_iou)?.into_iter().map(|k| *members[k]));
    }
    kept.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
    Ok(kept)
}

pub fn write_detections_csv<W: Write>(detections: &[Detection], class_names: &[&str], mut w: W) -> Result<()> {
    writeln!(w, "cx,cy,cz,l,w,h,yaw,score,class")?;
    for d in detections {
        let b = &d.bbox.bev;
        let name = class_names.get(d.class).ok_or_else(|| arg_err!("no name for class {}", d.class))?;
        writeln!(
            w,
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            b.cx, b.cy, d.bbox.cz, b.length, b.width, d.bbox.height, b.yaw, d.score, name
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{LN_2, PI};

    fn one_class(length: f64, width: f64) -> AnchorConfig {
        AnchorConfig {
            classes: vec![AnchorClass { length, width, ..AnchorClass::vehicle() }],
            yaws: vec![0.0, FRAC_PI_2],
        }
    }

    #[test]
    fn anchor_count_order_and_centres() {
        let grid = GridConfig::square(2, 1.0);
        let cfg = AnchorConfig { classes: vec![AnchorClass::vehicle()], ..Default::default() };
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        assert_eq!(anchors.len(), 8);
        assert_eq!((anchors[0].bbox.bev.cx, anchors[0].bbox.bev.cy), (0.5, 0.5));
        assert_eq!(anchors[1].bbox.bev.yaw, FRAC_PI_2);
        assert_eq!((anchors[2].bbox.bev.cx, anchors[2].bbox.bev.cy), (1.5, 0.5));
        assert_eq!((anchors[4].bbox.bev.cx, anchors[4].bbox.bev.cy), (0.5, 1.5));
        assert_eq!(anchors, generate_anchors(&grid, &cfg).unwrap());
        assert_eq!(generate_anchors(&grid, &AnchorConfig::default()).unwrap().len(), 16);
    }

    #[test]
    fn anchor_config_rejects_bad_thresholds() {
        let mut cfg = AnchorConfig::default();
        cfg.classes[0].unmatch_iou = 0.6;
        assert!(cfg.validate().is_err());
        let mut cfg = AnchorConfig::default();
        cfg.classes[1].name = "a,b".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gt_equal_to_anchor_is_positive_with_zero_residuals() {
        let grid = GridConfig::square(4, 1.0);
        let cfg = one_class(3.0, 1.0);
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let gt = [GtBox { bbox: anchors[5].bbox, class: 0 }];
        let t = assign_targets(&anchors, &gt, &cfg).unwrap();
        assert_eq!(t.labels[5], Label::Positive(0));
        assert_eq!(t.targets[5], [0.0; BOX_DIMS]);
    }

    #[test]
    fn no_gt_means_all_negative() {
        let grid = GridConfig::square(3, 1.0);
        let anchors = generate_anchors(&grid, &AnchorConfig::default()).unwrap();
        let t = assign_targets(&anchors, &[], &AnchorConfig::default()).unwrap();
        assert!(t.labels.iter().all(|l| *l == Label::Negative));
        assert_eq!(t.num_positive(), 0);
    }

    #[test]
    fn argmax_forces_one_positive() {
        // 10 m cells with 4 x 2 m anchors: anchors never overlap each other.
        let grid = GridConfig::square(3, 10.0);
        let cfg = AnchorConfig { yaws: vec![0.0], ..one_class(4.0, 2.0) };
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let gt = [GtBox { bbox: Box3d::new(15.3, 14.8, 0.0, 1.0, 1.0, 1.0, 0.3).unwrap(), class: 0 }];
        let t = assign_targets(&anchors, &gt, &cfg).unwrap();
        assert_eq!(t.num_positive(), 1);
        assert_eq!(t.labels[4], Label::Positive(0));
        let far = [GtBox { bbox: Box3d::new(100.0, 100.0, 0.0, 1.0, 1.0, 1.0, 0.0).unwrap(), class: 0 }];
        assert_eq!(assign_targets(&anchors, &far, &cfg).unwrap().num_positive(), 0);
    }

    #[test]
    fn other_class_gt_is_ignored_by_matching() {
        let grid = GridConfig::square(4, 1.0);
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let gt = [GtBox { bbox: anchors[0].bbox, class: 0 }];
        let t = assign_targets(&anchors, &gt, &cfg).unwrap();
        for (a, l) in anchors.iter().zip(&t.labels) {
            if a.class == 1 {
                assert_eq!(*l, Label::Negative);
            }
        }
        let bad = [GtBox { bbox: anchors[0].bbox, class: 2 }];
        assert!(assign_targets(&anchors, &bad, &cfg).is_err());
    }

    #[test]
    fn every_overlapping_gt_gets_a_positive() {
        let mut rng = XorShift64Star::new(5);
        let grid = GridConfig::square(20, 1.0);
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let gt: Vec<GtBox> = (0..6)
            .map(|i| GtBox {
                bbox: Box3d::new(
                    rng.uniform(2.0, 18.0),
                    rng.uniform(2.0, 18.0),
                    0.0,
                    rng.uniform(0.5, 5.0),
                    rng.uniform(0.5, 2.5),
                    1.5,
                    rng.uniform(-PI, PI),
                )
                .unwrap(),
                class: i % 2,
            })
            .collect();
        let t = assign_targets(&anchors, &gt, &cfg).unwrap();
        for j in 0..gt.len() {
            assert!(t.labels.contains(&Label::Positive(j)), "gt {j}");
        }
    }

    #[test]
    fn focal_closed_forms() {
        let v = focal_loss(&[0.0], &[Some(true)], Some(0.25), 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * LN_2).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        let v = focal_loss(&[50.0, -50.0], &[Some(true), Some(false)], Some(0.25), 2.0).unwrap();
        assert!(v < 1e-20);
        assert_eq!(focal_loss(&[1.0], &[None], Some(0.25), 2.0).unwrap(), 0.0);
    }

    #[test]
    fn focal_degenerates_to_bce() {
        let mut rng = XorShift64Star::new(6);
        let logits: Vec<f64> = (0..200).map(|_| rng.uniform(-8.0, 8.0)).collect();
        let targets: Vec<Option<bool>> = (0..200).map(|i| if i % 7 == 0 { None } else { Some(i % 3 == 0) }).collect();
        let focal = focal_loss(&logits, &targets, None, 0.0).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for (x, t) in logits.iter().zip(&targets) {
            if let Some(pos) = t {
                let p = 1.0 / (1.0 + (-x).exp());
                sum -= if *pos { p.ln() } else { (1.0 - p).ln() };
                n += 1;
            }
        }
        assert!((focal - sum / n as f64).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
        let beta = 0.3;
        assert!((smooth_l1(&[beta], &[0.0], beta).unwrap() - 0.5 * beta).abs() < 1e-15);
        assert!((smooth_l1(&[beta - 1e-12], &[0.0], beta).unwrap() - 0.5 * beta).abs() < 1e-11);
        assert!(smooth_l1(&[1.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn direction_cases() {
        assert!(direction_bin(0.0));
        assert!(!direction_bin(-1e-9));
        assert!(!direction_bin(PI));
        assert!(direction_loss(&[30.0, -30.0], &[1.0, -1.0]).unwrap() < 1e-6);
        assert!((direction_loss(&[0.0, 0.0, 0.0], &[1.0, -1.0, 0.0]).unwrap() - 3.0 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn total_loss_cases() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossParts::default(), w, 4), 0.0);
        let parts = LossParts { loc: 3.0, cls: 5.0, dir: 7.0 };
        assert_eq!(total_loss(parts, LossWeights { loc: 1.0, cls: 0.0, dir: 0.0 }, 2), 1.5);
        assert_eq!(total_loss(parts, LossWeights { loc: 1.0, cls: 0.0, dir: 0.0 }, 0), 3.0);
        assert!((total_loss(parts, w, 1) - (6.0 + 5.0 + 1.4)).abs() < 1e-12);
    }

    #[test]
    fn coding_round_trip() {
        let mut rng = XorShift64Star::new(7);
        for _ in 0..500 {
            let anchor =
                Box3d::new(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0), 0.0, 4.7, 2.1, 1.7, FRAC_PI_2).unwrap();
            let gt = Box3d::new(
                rng.uniform(-50.0, 50.0),
                rng.uniform(-50.0, 50.0),
                rng.uniform(-2.0, 2.0),
                rng.uniform(0.2, 10.0),
                rng.uniform(0.2, 4.0),
                rng.uniform(0.5, 4.0),
                rng.uniform(-3.1, 3.1),
            )
            .unwrap();
            let back = decode_box(&anchor, &encode_box(&anchor, &gt)).unwrap();
            let (a, b) = (&back.bev, &gt.bev);
            for (x, y) in [
                (a.cx, b.cx),
                (a.cy, b.cy),
                (back.cz, gt.cz),
                (a.length, b.length),
                (a.width, b.width),
                (back.height, gt.height),
            ] {
                assert!((x - y).abs() < 1e-9);
            }
            assert!(wrap_angle(a.yaw - b.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_zero_and_log_two() {
        let grid = GridConfig::square(2, 1.0);
        let anchors = generate_anchors(&grid, &AnchorConfig::default()).unwrap();
        let zero = Array2::zeros((anchors.len(), BOX_DIMS));
        let decoded = decode_boxes(&anchors, zero.view()).unwrap();
        assert!(decoded.iter().zip(&anchors).all(|(d, a)| *d == a.bbox));
        let mut d = [0.0; BOX_DIMS];
        d[3] = LN_2;
        let b = decode_box(&anchors[0].bbox, &d).unwrap();
        assert!((b.bev.length - 2.0 * anchors[0].bbox.bev.length).abs() < 1e-12);
    }

    #[test]
    fn scene_loss_on_perfect_outputs_is_small() {
        let grid = GridConfig::square(6, 1.0);
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let gt = [GtBox { bbox: Box3d::new(3.2, 2.9, 0.1, 4.5, 2.0, 1.6, -0.4).unwrap(), class: 0 }];
        let t = assign_targets(&anchors, &gt, &cfg).unwrap();
        let mut out = Array2::<f64>::zeros((anchors.len(), OUTPUTS_PER_ANCHOR));
        for (i, l) in t.labels.iter().enumerate() {
            out[[i, 0]] = match l {
                Label::Positive(_) => 40.0,
                _ => -40.0,
            };
            for k in 0..BOX_DIMS {
                out[[i, 1 + k]] = t.targets[i][k];
            }
            out[[i, DIR_OUTPUT]] = if direction_bin(anchors[i].bbox.bev.yaw + t.targets[i][6]) { 40.0 } else { -40.0 };
        }
        let (parts, total) = scene_loss(out.view(), &anchors, &t, &LossConfig::default()).unwrap();
        assert_eq!(parts.loc, 0.0);
        assert!(total < 1e-12, "{total}");
        out[[0, 1]] += 1.0;
        assert!(scene_loss(out.view(), &anchors, &t, &LossConfig::default()).unwrap().1 >= total);
    }

    #[test]
    fn predict_and_detect() {
        let grid = GridConfig::square(4, 1.0);
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid, &cfg).unwrap();
        let mut head = HeadParams::<f64>::zeros(3, cfg.anchors_per_cell());
        for a in 0..cfg.anchors_per_cell() {
            head.bias[a * OUTPUTS_PER_ANCHOR] = -10.0;
        }
        let map = DenseMap::<f64>::zeros(3, 4, 4);
        let mut ledger = FlopLedger::default();
        let mut out = predict(&map, &head, Some(&mut ledger)).unwrap();
        assert_eq!(out.dim(), (anchors.len(), OUTPUTS_PER_ANCHOR));
        assert_eq!(ledger.head, 16 * 3 * 36);
        assert!(decode_detections(out.view(), &anchors, &DetectConfig::default()).unwrap().is_empty());
        // Two overlapping vehicle anchors in the same cell, one pedestrian.
        out[[0, 0]] = 3.0;
        out[[0, DIR_OUTPUT]] = -1.0;
        out[[4, 0]] = 2.0;
        out[[2, 0]] = 1.0;
        let dets =
            decode_detections(out.view(), &anchors, &DetectConfig { nms_iou: 0.1, ..Default::default() }).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].class, 0);
        assert_eq!(dets[0].bbox.bev.yaw, -PI);
        assert_eq!(dets[1].class, 1);
        let mut buf = Vec::new();
        write_detections_csv(&dets, &cfg.class_names(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cx,cy,cz,l,w,h,yaw,score,class\n"));
        assert!(text.lines().nth(2).unwrap().ends_with(",pedestrian"));
    }
}
