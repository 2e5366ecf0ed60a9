//! The assembled detector: parameter initialization, the two-branch training
//! forward that produces every loss term, and inference.

use rand::Rng;

use super::backbone::{backbone_forward, fpn_fuse, init_backbone, init_fpn, BlockSet, Branch, FeaturePyramid};
use super::config::DetectorConfig;
use super::heads::{
    assign_rois, classification_loss, decode_rbox, encode_rbox, heads_forward, hroi_to_rroi, init_heads,
    learner_forward, learner_loss, regression_loss, RoiTargets,
};
use super::pooling::{hroi_pool, rroi_align, PooledRois, RoiStage};
use super::rpn::{anchors, init_rpn, propose, rpn_forward, rpn_loss, rpn_targets, Proposal, RpnTargets};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{gate_sigma, rotated_nms, score_order, HorizontalBox, OrientedBox};
use crate::losses::{
    category_distribution, consistency_variant, info_nce_gated, init_consistency_heads, paired_gates,
    project_embeddings, total_loss, CategoryHead, LossBreakdown, LossTerms, ProjectionHead,
};
use crate::style::{adain, StyleBank};

pub const BACKBONE_PREFIX: &str = "backbone";

/// Converts an `(H, W, C)` image to the `(C, H, W)` layout of the network.
pub fn hwc_to_chw(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("expected an (H, W, C) image, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[ch * h * w + y * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// One image with its annotations.
#[derive(Clone, Copy, Debug)]
pub struct AnnotatedImage<'a> {
    /// `(H, W, C)` pixels.
    pub image: &'a Tensor,
    pub boxes: &'a [OrientedBox],
    pub classes: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectedBox {
    pub rbox: OrientedBox,
    pub class: usize,
    pub score: f64,
}

/// Every discrete or geometric decision of one training image: once fixed,
/// the step loss is a smooth function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlan {
    pub rpn: RpnTargets,
    pub proposals: Vec<Proposal>,
    pub rboxes: Vec<OrientedBox>,
    pub targets: RoiTargets,
    pub gates_h: Vec<bool>,
    pub gates_r: Vec<bool>,
    /// Style-bank entry used by the hallucinated branch.
    pub style: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepPlan {
    pub images: Vec<ImagePlan>,
}

/// Feature nodes of both branches, exposed for inspection.
#[derive(Clone, Debug, Default)]
pub struct BranchTrace {
    pub pyramids: Vec<Var>,
    pub pooled_h: Option<Var>,
    pub pooled_r: Option<Var>,
    pub hall_pyramids: Vec<Var>,
    pub hall_pooled_h: Option<Var>,
    pub hall_pooled_r: Option<Var>,
}

/// Result of building one training step on a graph.
#[derive(Debug)]
pub struct StepGraph {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub plan: StepPlan,
    pub trace: BranchTrace,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    params: ParamStore,
}

fn concat_pooled(g: &mut Graph, parts: &[PooledRois]) -> Result<PooledRois> {
    let feats: Vec<Var> = parts.iter().map(|p| p.features).collect();
    Ok(PooledRois {
        stage: parts[0].stage,
        branch: parts[0].branch,
        features: g.concat(&feats, 0)?,
    })
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}

impl Detector {
    pub fn new(cfg: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        init_backbone(&mut params, &cfg, BACKBONE_PREFIX, rng)?;
        init_fpn(&mut params, &cfg, rng)?;
        init_rpn(&mut params, &cfg, rng)?;
        init_heads(&mut params, &cfg, rng)?;
        init_consistency_heads(
            &mut params,
            cfg.pooled_len(),
            cfg.head_hidden,
            cfg.embed_dim,
            cfg.num_classes,
            rng,
        )?;
        Ok(Detector { cfg, params })
    }

    /// Rebuilds a detector from stored parameters; names and shapes must
    /// match the architecture of `cfg`.
    pub fn from_parts(cfg: DetectorConfig, params: ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let reference = Detector::new(cfg.clone(), &mut rng)?;
        let want: Vec<(&str, &[usize])> = reference.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            let missing: Vec<&str> = want.iter().filter(|w| !got.contains(w)).map(|w| w.0).collect();
            let extra: Vec<&str> = got.iter().filter(|w| !want.contains(w)).map(|w| w.0).collect();
            return Err(Error::Config(format!(
                "parameters do not match the architecture (missing or reshaped: {missing:?}, unexpected: {extra:?})"
            )));
        }
        Ok(Detector { cfg, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Builds the full training loss for `batch` on `g`.
    ///
    /// Without a `plan`, proposals, RRoIs, target assignment, sampling and
    /// style draws are decided from the current parameters and `rng`, and the
    /// resulting plan is returned. With a plan, those decisions are replayed
    /// exactly and `rng` is not used.
    pub fn training_step(
        &self,
        g: &mut Graph,
        batch: &[AnnotatedImage<'_>],
        bank: Option<&StyleBank>,
        plan: Option<&StepPlan>,
        rng: &mut impl Rng,
    ) -> Result<StepGraph> {
        let cfg = &self.cfg;
        let p = &self.params;
        let toggles = cfg.toggles;
        if batch.is_empty() {
            return Err(Error::invalid("training step needs at least one image"));
        }
        if let Some(pl) = plan {
            if pl.images.len() != batch.len() {
                return Err(Error::invalid("plan does not match the batch size"));
            }
        }
        let bank = match (toggles.style, bank) {
            (true, None) => return Err(Error::Config("style hallucination is enabled but no style bank was given".into())),
            (true, Some(b)) if b.is_empty() => return Err(Error::Config("style bank is empty".into())),
            (_, b) => b,
        };
        for img in batch {
            if img.boxes.len() != img.classes.len() {
                return Err(Error::invalid("boxes and classes differ in length"));
            }
            if let Some(&c) = img.classes.iter().find(|&&c| c >= cfg.num_classes) {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
        }
        let n = cfg.proposals;
        let all_anchors = anchors(cfg);
        let mut trace = BranchTrace::default();

        // original branch up to the horizontal RoIs
        let mut block_maps = Vec::with_capacity(batch.len());
        let mut pyrs = Vec::with_capacity(batch.len());
        let mut rpn_cls = Vec::new();
        let mut rpn_reg = Vec::new();
        let mut plans: Vec<ImagePlan> = Vec::with_capacity(batch.len());
        let mut pooled_h = Vec::with_capacity(batch.len());
        for (i, img) in batch.iter().enumerate() {
            let x = g.constant(hwc_to_chw(img.image)?)?;
            let maps = backbone_forward(g, p, cfg, BACKBONE_PREFIX, x)?;
            let pyr = fpn_fuse(
                g,
                p,
                cfg,
                &BlockSet {
                    branch: Branch::Original,
                    maps,
                },
            )?;
            let out = rpn_forward(g, p, cfg, &pyr)?;
            let (targets, proposals) = match plan {
                Some(pl) => (pl.images[i].rpn.clone(), pl.images[i].proposals.clone()),
                None => {
                    let t = rpn_targets(&all_anchors, img.boxes, rng);
                    let hulls: Vec<HorizontalBox> = img.boxes.iter().map(OrientedBox::hull).collect();
                    let props = propose(cfg, &all_anchors, g.data(out.logits), g.data(out.deltas), &hulls)?;
                    (t, props)
                }
            };
            let (c, r) = rpn_loss(g, &out, &targets)?;
            rpn_cls.push(c);
            rpn_reg.push(r);
            let hboxes: Vec<HorizontalBox> = proposals.iter().map(|pr| pr.hbox).collect();
            pooled_h.push(hroi_pool(g, &pyr, &hboxes, cfg.pool_size)?);
            plans.push(ImagePlan {
                rpn: targets,
                proposals,
                rboxes: Vec::new(),
                targets: RoiTargets::default(),
                gates_h: Vec::new(),
                gates_r: Vec::new(),
                style: None,
            });
            trace.pyramids.push(pyr.map);
            block_maps.push(maps);
            pyrs.push(pyr);
        }
        let pooled_h = concat_pooled(g, &pooled_h)?;
        trace.pooled_h = Some(pooled_h.features);

        // HRoI -> RRoI
        let raw = learner_forward(g, p, &pooled_h)?;
        let mut learner_rows = Vec::new();
        for (i, img) in batch.iter().enumerate() {
            let ip = &mut plans[i];
            match plan {
                Some(pl) => {
                    let src = &pl.images[i];
                    ip.rboxes = src.rboxes.clone();
                    ip.targets = src.targets.clone();
                    ip.gates_h = src.gates_h.clone();
                    ip.gates_r = src.gates_r.clone();
                }
                None => {
                    let vals = g.data(raw);
                    ip.rboxes = (0..n)
                        .map(|j| hroi_to_rroi(&ip.proposals[j].hbox, &vals[(i * n + j) * 5..(i * n + j + 1) * 5]))
                        .collect::<Result<_>>()?;
                    let hboxes: Vec<HorizontalBox> = ip.proposals.iter().map(|pr| pr.hbox).collect();
                    ip.targets = assign_rois(&hboxes, img.boxes, img.classes, cfg.num_classes, rng);
                    ip.gates_h = hboxes.iter().map(|h| gate_sigma(h, img.boxes)).collect();
                    ip.gates_r = ip.rboxes.iter().map(|r| gate_sigma(r, img.boxes)).collect();
                }
            }
            for (j, k) in ip.targets.positives() {
                learner_rows.push((i * n + j, ip.proposals[j].hbox, img.boxes[k]));
            }
        }
        let l_learner = learner_loss(g, raw, &learner_rows)?;

        // rotated pooling and detection head on the original branch
        let mut pooled_r = Vec::with_capacity(batch.len());
        for (i, pyr) in pyrs.iter().enumerate() {
            pooled_r.push(rroi_align(g, pyr, &plans[i].rboxes, cfg.pool_size)?);
        }
        let pooled_r = concat_pooled(g, &pooled_r)?;
        trace.pooled_r = Some(pooled_r.features);
        let mut cls_rows = Vec::new();
        let mut cls_labels = Vec::new();
        let mut reg_rows = Vec::new();
        for (i, (img, ip)) in batch.iter().zip(&plans).enumerate() {
            for &j in &ip.targets.sampled {
                cls_rows.push(i * n + j);
                cls_labels.push(ip.targets.labels[j]);
            }
            for (j, k) in ip.targets.positives() {
                reg_rows.push((i * n + j, encode_rbox(&ip.rboxes[j], &img.boxes[k])));
            }
        }
        let (logits, deltas) = heads_forward(g, p, &pooled_r)?;
        let mut head_cls = vec![classification_loss(g, logits, &cls_rows, &cls_labels)?];
        let mut head_reg = vec![regression_loss(g, deltas, &reg_rows)?];

        let mut terms = LossTerms::default();
        if toggles.needs_second_branch() {
            let mut hall_h = Vec::with_capacity(batch.len());
            let mut hall_r = Vec::with_capacity(batch.len());
            for i in 0..batch.len() {
                let style = match plan {
                    Some(pl) => pl.images[i].style,
                    None if toggles.style => Some(bank.expect("checked above").sample_index(rng)?),
                    None => None,
                };
                plans[i].style = style;
                let maps = block_maps[i];
                let mut hall = maps;
                let mut changed = false;
                if let (Some(s), Some(bank)) = (style, bank) {
                    let entry = bank
                        .entries()
                        .get(s)
                        .ok_or_else(|| Error::invalid(format!("style entry {s} not in the bank")))?;
                    for k in 0..4 {
                        if cfg.style_blocks[k] {
                            hall[k] = adain(g, maps[k], &entry.blocks[k])?;
                            changed = true;
                        }
                    }
                }
                let pyr_h = if changed {
                    fpn_fuse(
                        g,
                        p,
                        cfg,
                        &BlockSet {
                            branch: Branch::Hallucinated,
                            maps: hall,
                        },
                    )?
                } else {
                    FeaturePyramid {
                        branch: Branch::Hallucinated,
                        map: pyrs[i].map,
                    }
                };
                trace.hall_pyramids.push(pyr_h.map);
                let hboxes: Vec<HorizontalBox> = plans[i].proposals.iter().map(|pr| pr.hbox).collect();
                hall_h.push(hroi_pool(g, &pyr_h, &hboxes, cfg.pool_size)?);
                hall_r.push(rroi_align(g, &pyr_h, &plans[i].rboxes, cfg.pool_size)?);
            }
            let hall_h = concat_pooled(g, &hall_h)?;
            let hall_r = concat_pooled(g, &hall_r)?;
            trace.hall_pooled_h = Some(hall_h.features);
            trace.hall_pooled_r = Some(hall_r.features);

            let (logits_h, deltas_h) = heads_forward(g, p, &hall_r)?;
            head_cls.push(classification_loss(g, logits_h, &cls_rows, &cls_labels)?);
            head_reg.push(regression_loss(g, deltas_h, &reg_rows)?);

            let contrast = |g: &mut Graph, a: Var, b: Var, gates: &dyn Fn(&ImagePlan) -> &[bool]| -> Result<Var> {
                let mut per_image = Vec::with_capacity(plans.len());
                for (i, ip) in plans.iter().enumerate() {
                    let za = g.narrow(a, 0, i * n, n)?;
                    let zb = g.narrow(b, 0, i * n, n)?;
                    let z = g.concat(&[za, zb], 0)?;
                    per_image.push(info_nce_gated(g, z, &paired_gates(gates(ip)), cfg.tau)?);
                }
                mean_of(g, &per_image)
            };
            if toggles.hcl {
                let z = project_embeddings(g, p, ProjectionHead::F1, &pooled_h)?;
                let zt = project_embeddings(g, p, ProjectionHead::F2, &hall_h)?;
                terms.hcl = Some(contrast(g, z, zt, &|ip| &ip.gates_h)?);
            }
            if toggles.rac {
                let z = project_embeddings(g, p, ProjectionHead::F3, &pooled_r)?;
                let zt = project_embeddings(g, p, ProjectionHead::F4, &hall_r)?;
                terms.rac = Some(contrast(g, z, zt, &|ip| &ip.gates_r)?);
            }
            if toggles.sec {
                let rows: Vec<usize> = plans
                    .iter()
                    .enumerate()
                    .flat_map(|(i, ip)| ip.gates_r.iter().enumerate().filter(|e| *e.1).map(move |(j, _)| i * n + j))
                    .collect();
                terms.sec = Some(if rows.is_empty() {
                    g.constant(Tensor::scalar(0.0))?
                } else {
                    let pd = category_distribution(g, p, CategoryHead::G1, &pooled_r)?;
                    let qd = category_distribution(g, p, CategoryHead::G2, &hall_r)?;
                    let pd = g.gather_rows(pd, &rows)?;
                    let qd = g.gather_rows(qd, &rows)?;
                    consistency_variant(g, pd, qd, cfg.sec_metric)?
                });
            }
        }

        let rpn_c = mean_of(g, &rpn_cls)?;
        let rpn_r = mean_of(g, &rpn_reg)?;
        let hc = mean_of(g, &head_cls)?;
        let hr = mean_of(g, &head_reg)?;
        let cls = g.add(rpn_c, hc)?;
        let reg = g.add(rpn_r, hr)?;
        let reg = g.add(reg, l_learner)?;
        terms.cls = Some(cls);
        terms.reg = Some(reg);
        let (loss, breakdown) = total_loss(g, &terms, &cfg.weights)?;
        Ok(StepGraph {
            loss,
            breakdown,
            plan: StepPlan { images: plans },
            trace,
        })
    }

    /// Runs the original branch on an `(H, W, C)` image and returns
    /// per-class NMS-filtered oriented detections, best first.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<DetectedBox>> {
        let cfg = &self.cfg;
        let p = &self.params;
        let mut g = Graph::new();
        let x = g.constant(hwc_to_chw(image)?)?;
        let maps = backbone_forward(&mut g, p, cfg, BACKBONE_PREFIX, x)?;
        let pyr = fpn_fuse(
            &mut g,
            p,
            cfg,
            &BlockSet {
                branch: Branch::Original,
                maps,
            },
        )?;
        let out = rpn_forward(&mut g, p, cfg, &pyr)?;
        let props = propose(cfg, &anchors(cfg), g.data(out.logits), g.data(out.deltas), &[])?;
        let hboxes: Vec<HorizontalBox> = props.iter().map(|pr| pr.hbox).collect();
        let pooled_h = hroi_pool(&mut g, &pyr, &hboxes, cfg.pool_size)?;
        let raw = learner_forward(&mut g, p, &pooled_h)?;
        let rboxes: Vec<OrientedBox> = {
            let vals = g.data(raw);
            hboxes
                .iter()
                .enumerate()
                .map(|(j, h)| hroi_to_rroi(h, &vals[j * 5..(j + 1) * 5]))
                .collect::<Result<_>>()?
        };
        let pooled_r = rroi_align(&mut g, &pyr, &rboxes, cfg.pool_size)?;
        debug_assert_eq!(pooled_r.stage, RoiStage::Rotated);
        let (logits, deltas) = heads_forward(&mut g, p, &pooled_r)?;
        let probs = g.softmax(logits)?;
        let probs = g.data(probs);
        let dv = g.data(deltas);
        let k1 = cfg.num_classes + 1;
        let boxes: Vec<OrientedBox> = rboxes
            .iter()
            .enumerate()
            .map(|(j, r)| decode_rbox(r, &dv[j * 5..(j + 1) * 5]))
            .collect::<Result<_>>()?;
        let mut dets = Vec::new();
        for class in 0..cfg.num_classes {
            let cand: Vec<usize> = (0..boxes.len())
                .filter(|&j| probs[j * k1 + class] > cfg.score_threshold)
                .collect();
            if cand.is_empty() {
                continue;
            }
            let cb: Vec<OrientedBox> = cand.iter().map(|&j| boxes[j]).collect();
            let cs: Vec<f64> = cand.iter().map(|&j| probs[j * k1 + class]).collect();
            for k in rotated_nms(&cb, &cs, cfg.nms_iou)? {
                dets.push(DetectedBox {
                    rbox: cb[k],
                    class,
                    score: cs[k],
                });
            }
        }
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        let mut sorted: Vec<DetectedBox> = score_order(&scores).into_iter().map(|i| dets[i]).collect();
        sorted.truncate(cfg.max_detections);
        Ok(sorted)
    }
}
