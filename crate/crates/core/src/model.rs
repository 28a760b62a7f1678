//! Unimodal and two-stream networks assembled from the spatial, recoupling
//! and temporal modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clip::{Modality, VideoClip};
use crate::dsn::{dsn_forward, Dsn};
use crate::dtn::{aggregate_branches, branch_forward, subsample, subsample_indices, BranchConfig, DtnBranch};
use crate::error::{dim_err, param_err, Result};
use crate::frp::{clip_guidance, FrpConfig};
use crate::fusion::{
    capf_forward, multimodal_total_loss, spatial_interact, temporal_interact, unimodal_total_loss, Capf, LossReport,
    ModalTerms,
};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::params::{ParamBuilder, ParamStore};
use crate::rcm::{distill_loss, rcm_forward, Rcm};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Frames per clip.
    pub frames: usize,
    /// Side of the square network input.
    pub crop: usize,
    /// Spatial layer widths; the last one is the feature width `d`.
    pub channels: Vec<usize>,
    pub branches: Vec<BranchConfig>,
    pub frp: FrpConfig,
    pub use_frp: bool,
    pub use_rcm: bool,
    pub temperature: f64,
    pub gamma: f64,
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.classes < 2 {
            return Err(param_err!("need at least 2 classes"));
        }
        if self.channels.is_empty() || d % 8 != 0 {
            return Err(param_err!("feature width {d} must be a positive multiple of 8"));
        }
        if self.crop >> self.channels.len() == 0 {
            return Err(param_err!("crop {} too small for {} pooling layers", self.crop, self.channels.len()));
        }
        if self.branches.is_empty() {
            return Err(param_err!("need at least one temporal branch"));
        }
        if let Some(b) = self.branches.iter().find(|b| b.frames > self.frames || b.frames < 2) {
            return Err(param_err!("branch length {} must lie in 2..={}", b.frames, self.frames));
        }
        if self.use_frp && self.frp.span >= self.frames {
            return Err(param_err!("window span {} must be below {} frames", self.frp.span, self.frames));
        }
        if self.temperature <= 0.0 {
            return Err(param_err!("distillation temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(param_err!("gamma must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Network-ready tensors for one modality of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamInput {
    /// `C×T×H×W`.
    pub frames: Tensor<f32>,
    /// One `1×T×h×w` stack per spatial layer; empty when guidance is off.
    pub guidance: Vec<Tensor<f32>>,
}

/// One modality's spatial, recoupling and temporal networks plus its classifier.
#[derive(Clone, Debug)]
pub struct Stream {
    pub modality: Modality,
    pub dsn: Dsn,
    pub rcm: Rcm,
    pub branches: Vec<DtnBranch>,
    pub classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// Per-branch class vectors before sharpening.
    pub cls: Vec<Var>,
    pub aggregate: Var,
    pub branch_logits: Vec<Var>,
    pub logits: Var,
}

impl Stream {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &ModelConfig, modality: Modality) -> Result<Self> {
        let d = cfg.width();
        b.scoped(modality.name(), |b| {
            Ok(Stream {
                modality,
                dsn: Dsn::new(b, "dsn", modality.channels(), &cfg.channels)?,
                rcm: Rcm::new(b, "rcm", cfg.frames, d, cfg.classes)?,
                branches: cfg
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(k, bc)| DtnBranch::new(b, &format!("dtn{}", k + 1), d / 2, bc.clone()))
                    .collect::<Result<_>>()?,
                classifier: Linear::new(b, "classifier", d / 2, cfg.classes, false)?,
            })
        })
    }

    pub fn prepare(&self, clip: &VideoClip, cfg: &ModelConfig) -> Result<StreamInput> {
        if clip.modality != self.modality {
            return Err(param_err!("{} stream given a {} clip", self.modality, clip.modality));
        }
        if clip.len() != cfg.frames || clip.height() != cfg.crop || clip.width() != cfg.crop {
            return Err(dim_err!(
                "clip is {}×{}×{}, model expects {}×{}×{}",
                clip.len(),
                clip.height(),
                clip.width(),
                cfg.frames,
                cfg.crop,
                cfg.crop
            ));
        }
        let guidance = if cfg.use_frp {
            let sizes = self.dsn.guidance_sizes(cfg.crop, cfg.crop);
            clip_guidance(clip, &cfg.frp, &sizes)?.iter().map(|s| s.to_tensor()).collect()
        } else {
            Vec::new()
        };
        Ok(StreamInput {
            frames: clip.channel_first(),
            guidance,
        })
    }

    /// Spatial features `T×d`.
    pub fn spatial<F: Real>(&self, g: &mut Graph<F>, ps: &ParamStore<F>, input: &StreamInput) -> Result<Var> {
        let x = g.constant(input.frames.cast());
        if input.guidance.is_empty() {
            return dsn_forward(g, ps, &self.dsn, x, None);
        }
        let gd: Vec<Var> = input.guidance.iter().map(|t| g.constant(t.cast())).collect();
        dsn_forward(g, ps, &self.dsn, x, Some(&gd))
    }

    /// Enhanced `T×(d/2)` features; without recoupling only the projection is applied.
    pub fn recouple<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        features: Var,
        use_rcm: bool,
    ) -> Result<(Var, Option<Var>)> {
        if use_rcm {
            let out = rcm_forward(g, ps, &self.rcm, features)?;
            Ok((out.enhanced, Some(out.w_embed)))
        } else {
            Ok((self.rcm.proj.forward(g, ps, features)?, None))
        }
    }

    pub fn temporal<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        enhanced: Var,
        tau: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TemporalOutput> {
        let total = g.shape(enhanced)[0];
        let mut cls = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let idx = subsample_indices(total, branch.config.frames, rng.as_deref_mut())?;
            let x = subsample(g, enhanced, &idx)?;
            cls.push(branch_forward(g, ps, branch, x)?);
        }
        let aggregate = aggregate_branches(g, &cls, tau)?;
        let inv = F::of(1.0 / tau);
        let mut branch_logits = Vec::with_capacity(cls.len());
        for &z in &cls {
            let sharp = g.scale(z, inv);
            branch_logits.push(self.classifier.forward(g, ps, sharp)?);
        }
        let logits = self.classifier.forward(g, ps, aggregate)?;
        Ok(TemporalOutput {
            cls,
            aggregate,
            branch_logits,
            logits,
        })
    }

    fn distill<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        w_embed: Option<Var>,
        teacher: Var,
        temperature: f64,
    ) -> Result<Option<Var>> {
        w_embed.map(|w| distill_loss(g, ps, &self.rcm, w, teacher, temperature)).transpose()
    }
}

#[derive(Clone, Debug)]
pub struct UnimodalOutput {
    pub logits: Var,
    pub branch_logits: Vec<Var>,
    pub loss: Option<(Var, LossReport)>,
}

#[derive(Clone, Debug)]
pub struct UnimodalNet {
    pub config: ModelConfig,
    pub stream: Stream,
}

impl UnimodalNet {
    pub fn new(b: &mut ParamBuilder<'_>, config: ModelConfig, modality: Modality) -> Result<Self> {
        config.validate()?;
        let stream = Stream::new(b, &config, modality)?;
        Ok(UnimodalNet { config, stream })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        input: &StreamInput,
        tau: f64,
        rng: Option<&mut ChaCha8Rng>,
        target: Option<usize>,
    ) -> Result<UnimodalOutput> {
        let s = &self.stream;
        let o = s.spatial(g, ps, input)?;
        let (enhanced, w_embed) = s.recouple(g, ps, o, self.config.use_rcm)?;
        let t = s.temporal(g, ps, enhanced, tau, rng)?;
        let loss = match target {
            Some(y) => {
                let distill = s.distill(g, ps, w_embed, t.logits, self.config.temperature)?;
                let (total, report, _) = unimodal_total_loss(g, &t.branch_logits, distill, y, self.config.gamma)?;
                Some((total, report))
            }
            None => None,
        };
        Ok(UnimodalOutput {
            logits: t.logits,
            branch_logits: t.branch_logits,
            loss,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MultimodalOutput {
    pub rgb_logits: Var,
    pub depth_logits: Var,
    pub capf_logits: Var,
    pub loss: Option<(Var, LossReport)>,
}

#[derive(Clone, Debug)]
pub struct MultimodalNet {
    pub config: ModelConfig,
    pub rgb: Stream,
    pub depth: Stream,
    pub spatial_mlp: Mlp,
    pub spatial_norm: LayerNorm,
    pub temporal_mlp: Mlp,
    pub capf: Capf,
    pub capf_classifier: Linear,
}

impl MultimodalNet {
    pub fn new(b: &mut ParamBuilder<'_>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.width();
        let rgb = Stream::new(b, &config, Modality::Rgb)?;
        let depth = Stream::new(b, &config, Modality::Depth)?;
        b.scoped("fusion", |b| {
            Ok(MultimodalNet {
                rgb,
                depth,
                spatial_mlp: Mlp::new(b, "spatial_mlp", &[d, d, d])?,
                spatial_norm: LayerNorm::new(b, "spatial_norm", d)?,
                temporal_mlp: Mlp::new(b, "temporal_mlp", &[d, d / 2, d / 2])?,
                capf: Capf::new(b, "capf", d / 2)?,
                capf_classifier: Linear::new(b, "capf_classifier", d / 4, config.classes, true)?,
                config,
            })
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        rgb_in: &StreamInput,
        depth_in: &StreamInput,
        tau: f64,
        mut rng: Option<&mut ChaCha8Rng>,
        target: Option<usize>,
    ) -> Result<MultimodalOutput> {
        let use_rcm = self.config.use_rcm;
        let o_r = self.rgb.spatial(g, ps, rgb_in)?;
        let o_d = self.depth.spatial(g, ps, depth_in)?;
        let (e_r, w_r) = self.rgb.recouple(g, ps, o_r, use_rcm)?;
        let (e_d, w_d) = self.depth.recouple(g, ps, o_d, use_rcm)?;
        let (mlp, norm) = (&self.spatial_mlp, &self.spatial_norm);
        let j_r = spatial_interact(g, ps, mlp, norm, e_r, e_d, o_r)?;
        let j_d = spatial_interact(g, ps, mlp, norm, e_d, e_r, o_d)?;
        // the joint features only need narrowing to the temporal width
        let h_r = self.rgb.rcm.proj.forward(g, ps, j_r)?;
        let h_d = self.depth.rcm.proj.forward(g, ps, j_d)?;
        let t_r = self.rgb.temporal(g, ps, h_r, tau, rng.as_deref_mut())?;
        let t_d = self.depth.temporal(g, ps, h_d, tau, rng.as_deref_mut())?;
        let joint = temporal_interact(g, ps, &self.temporal_mlp, t_r.aggregate, t_d.aggregate)?;
        let capf = capf_forward(g, ps, &self.capf, joint)?;
        let capf_logits = self.capf_classifier.forward(g, ps, capf.encoded)?;
        let loss = match target {
            Some(y) => {
                let temp = self.config.temperature;
                let dr = self.rgb.distill(g, ps, w_r, t_r.logits, temp)?;
                let dd = self.depth.distill(g, ps, w_d, t_d.logits, temp)?;
                let mods = [
                    ModalTerms {
                        name: "rgb",
                        logits: t_r.logits,
                        distill: dr,
                    },
                    ModalTerms {
                        name: "depth",
                        logits: t_d.logits,
                        distill: dd,
                    },
                ];
                Some(multimodal_total_loss(g, &mods, capf.recon, capf_logits, y)?)
            }
            None => None,
        };
        Ok(MultimodalOutput {
            rgb_logits: t_r.logits,
            depth_logits: t_d.logits,
            capf_logits,
            loss,
        })
    }
}

fn need(c: Option<&VideoClip>, m: Modality) -> Result<&VideoClip> {
    c.ok_or_else(|| param_err!("missing {m} clip"))
}

/// Either network, as chosen by the modality setting.
#[derive(Clone, Debug)]
pub enum Network {
    Unimodal(UnimodalNet),
    Multimodal(MultimodalNet),
}

/// Class scores of one clip.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Unimodal(Vec<f32>),
    Multimodal { rgb: Vec<f32>, depth: Vec<f32>, capf: Vec<f32> },
}

impl Prediction {
    /// The model's own decision: the class logits, or the CAPF sum.
    pub fn class(&self) -> usize {
        match self {
            Prediction::Unimodal(l) => crate::fusion::argmax(l),
            Prediction::Multimodal { rgb, depth, capf } => crate::fusion::classify(rgb, depth, capf),
        }
    }
}

/// Inputs of one clip for whichever streams the network has.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub rgb: Option<StreamInput>,
    pub depth: Option<StreamInput>,
}

pub struct ForwardResult {
    pub prediction: Prediction,
    pub loss: Option<(Var, LossReport)>,
}

/// Which streams a network consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    Single(Modality),
    Both,
}

impl Network {
    /// Builds a fresh network and its parameters from a seed.
    pub fn build(config: ModelConfig, streams: Streams, seed: u64) -> Result<(Network, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let net = match streams {
            Streams::Single(m) => Network::Unimodal(UnimodalNet::new(&mut b, config, m)?),
            Streams::Both => Network::Multimodal(MultimodalNet::new(&mut b, config)?),
        };
        Ok((net, store))
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Network::Unimodal(n) => &n.config,
            Network::Multimodal(n) => &n.config,
        }
    }

    pub fn streams(&self) -> Streams {
        match self {
            Network::Unimodal(n) => Streams::Single(n.stream.modality),
            Network::Multimodal(_) => Streams::Both,
        }
    }

    /// Converts clips (already cropped to the input size) into network inputs.
    pub fn prepare(&self, rgb: Option<&VideoClip>, depth: Option<&VideoClip>) -> Result<SampleInput> {
        let cfg = self.config();
        Ok(match self {
            Network::Unimodal(n) => {
                let s = &n.stream;
                let input = match s.modality {
                    Modality::Rgb => s.prepare(need(rgb, Modality::Rgb)?, cfg)?,
                    Modality::Depth => s.prepare(need(depth, Modality::Depth)?, cfg)?,
                };
                match s.modality {
                    Modality::Rgb => SampleInput {
                        rgb: Some(input),
                        depth: None,
                    },
                    Modality::Depth => SampleInput {
                        rgb: None,
                        depth: Some(input),
                    },
                }
            }
            Network::Multimodal(n) => SampleInput {
                rgb: Some(n.rgb.prepare(need(rgb, Modality::Rgb)?, cfg)?),
                depth: Some(n.depth.prepare(need(depth, Modality::Depth)?, cfg)?),
            },
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        ps: &ParamStore<F>,
        input: &SampleInput,
        tau: f64,
        rng: Option<&mut ChaCha8Rng>,
        target: Option<usize>,
    ) -> Result<ForwardResult> {
        let values = |g: &Graph<F>, v: Var| -> Vec<f32> { g.value(v).iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect() };
        let missing = || param_err!("sample lacks an input the network needs");
        match self {
            Network::Unimodal(n) => {
                let si = match n.stream.modality {
                    Modality::Rgb => input.rgb.as_ref(),
                    Modality::Depth => input.depth.as_ref(),
                }
                .ok_or_else(missing)?;
                let out = n.forward(g, ps, si, tau, rng, target)?;
                Ok(ForwardResult {
                    prediction: Prediction::Unimodal(values(g, out.logits)),
                    loss: out.loss,
                })
            }
            Network::Multimodal(n) => {
                let (r, d) = (input.rgb.as_ref().ok_or_else(missing)?, input.depth.as_ref().ok_or_else(missing)?);
                let out = n.forward(g, ps, r, d, tau, rng, target)?;
                Ok(ForwardResult {
                    prediction: Prediction::Multimodal {
                        rgb: values(g, out.rgb_logits),
                        depth: values(g, out.depth_logits),
                        capf: values(g, out.capf_logits),
                    },
                    loss: out.loss,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn micro_config() -> ModelConfig {
        ModelConfig {
            classes: 3,
            frames: 8,
            crop: 8,
            channels: vec![8, 16],
            branches: vec![BranchConfig::new(4, 1), BranchConfig::new(8, 1)],
            frp: FrpConfig {
                span: 3,
                ..FrpConfig::default()
            },
            use_frp: true,
            use_rcm: true,
            temperature: 0.4,
            gamma: 0.5,
        }
    }

    fn clip(m: Modality, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = m.channels();
        let data = (0..8 * c * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        VideoClip::new(Tensor::new(&[8, c, 8, 8], data).unwrap(), 1, m).unwrap()
    }

    #[test]
    fn unimodal_forward_and_loss() {
        let (net, ps) = Network::build(micro_config(), Streams::Single(Modality::Rgb), 1).unwrap();
        assert!(ps.id("rgb.dsn.layer1.branch0.kernel").is_some());
        let c = clip(Modality::Rgb, 2);
        let input = net.prepare(Some(&c), None).unwrap();
        let mut g = Graph::new();
        let out = net.forward(&mut g, &ps, &input, 0.07, None, Some(1)).unwrap();
        let (total, report) = out.loss.unwrap();
        assert_eq!(report.names(), vec!["cls_s1", "cls_s2", "cls_all", "distill"]);
        assert!((g.scalar(total) as f64 - report.total).abs() < 1e-6);
        match out.prediction {
            Prediction::Unimodal(l) => assert_eq!(l.len(), 3),
            _ => panic!("wrong prediction kind"),
        }
        assert!(net.prepare(None, Some(&clip(Modality::Depth, 3))).is_err());
    }

    #[test]
    fn zeroed_interaction_matches_unimodal_streams() {
        let mut cfg = micro_config();
        cfg.use_frp = false;
        let (net, mut ps) = Network::build(cfg.clone(), Streams::Both, 4).unwrap();
        let Network::Multimodal(mm) = &net else { panic!() };
        for l in &mm.spatial_mlp.layers {
            ps.get_mut(l.weight).data_mut().fill(0.0);
            ps.get_mut(l.bias.unwrap()).data_mut().fill(0.0);
        }
        let (r, d) = (clip(Modality::Rgb, 5), clip(Modality::Depth, 6));
        let input = net.prepare(Some(&r), Some(&d)).unwrap();
        let mut g = Graph::new();
        let out = mm.forward(&mut g, &ps, input.rgb.as_ref().unwrap(), input.depth.as_ref().unwrap(), 0.07, None, None).unwrap();
        // with the interaction zeroed the joint features are the raw ones, narrowed by the projection
        let rgb_alone = UnimodalNet {
            config: ModelConfig { use_rcm: false, ..cfg },
            stream: mm.rgb.clone(),
        };
        let mut g2 = Graph::new();
        let solo = rgb_alone.forward(&mut g2, &ps, input.rgb.as_ref().unwrap(), 0.07, None, None).unwrap();
        assert_eq!(g.value(out.rgb_logits), g2.value(solo.logits));
    }

    #[test]
    fn multimodal_report() {
        let (net, ps) = Network::build(micro_config(), Streams::Both, 7).unwrap();
        let input = net.prepare(Some(&clip(Modality::Rgb, 8)), Some(&clip(Modality::Depth, 9))).unwrap();
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward(&mut g, &ps, &input, 0.05, Some(&mut rng), Some(2)).unwrap();
        let (total, report) = out.loss.unwrap();
        assert_eq!(report.terms.len(), 10);
        let mut ps = ps;
        g.backward(total).unwrap().accumulate_into(&mut ps).unwrap();
        for name in ["rgb.dsn.layer1.branch1.kernel", "depth.rcm.w_q", "rgb.dtn2.block0.attn.key.weight", "fusion.capf.encoder.fc0.weight", "fusion.spatial_mlp.fc1.weight"] {
            let id = ps.id(name).unwrap();
            assert!(ps.get(id).grad().unwrap().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro_config();
        cfg.branches[0].frames = 9;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.frp.span = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.channels = vec![8, 12];
        assert!(cfg.validate().is_err());
    }
}
