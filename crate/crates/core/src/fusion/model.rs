//! The policy network for every strategy: modality encoders, one or two
//! temporal U-Net denoisers and the strategy-specific head that turns their
//! outputs into the final noise estimate.

use crate::diffusion::{EpsModel, LossLayout};
use crate::error::{Error, Result};
use crate::models::encoders::{gate_rows, gate_rows_backward, softmax2, Encoder, Modality, Router, ScalePredictor};
use crate::models::layers::{sigmoid, softplus, timestep_embedding, MlpCache};
use crate::models::params::{Builder, Init, ParamId, ParameterSet};
use crate::models::unet::{TemporalUnet, UnetCache, UnetDims};
use crate::models::{detect_contact, Mat, Scalar, FEATURE_DIM};
use crate::rng::Rng;
use crate::simenv::{ObservationWindow, ACTION_DIM, HISTORY, JOINTS, VISUAL_DIM};

use super::strategy::{StrategyConfig, StrategyTag};

pub const TEMB_DIM: usize = 64;

/// Clip bound for auxiliary torque z-scores in the sampler.
pub const AUX_CLIP: f32 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub visual: usize,
    pub joints: usize,
    pub history: usize,
    pub horizon: usize,
    pub action: usize,
    pub c1: usize,
    pub c2: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            visual: VISUAL_DIM,
            joints: JOINTS,
            history: HISTORY,
            horizon: 8,
            action: ACTION_DIM,
            c1: 16,
            c2: 32,
        }
    }
}

impl ModelDims {
    pub fn torque_len(&self) -> usize {
        self.joints * self.history
    }
}

/// One slot of a conditioning vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Vision,
    Torque,
    Gated,
    Proprio,
    /// Flattened normalized torque history without an encoder.
    RawTorque,
}

/// Which blocks feed the main denoiser, the torque expert, and the
/// router or scale predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub main: Vec<Block>,
    pub expert: Option<Vec<Block>>,
    pub mix: Option<Vec<Block>>,
}

impl Layout {
    pub fn for_tag(tag: StrategyTag) -> Layout {
        use Block::*;
        let (main, expert, mix) = match tag {
            StrategyTag::VisionOnly => (vec![Vision, Proprio], None, None),
            StrategyTag::Concat | StrategyTag::AuxGoals => (vec![Vision, Torque, Proprio], None, None),
            StrategyTag::Gated => (vec![Vision, Gated, Proprio], None, None),
            StrategyTag::Moe => (vec![Vision, Proprio], Some(vec![Torque]), Some(vec![Vision, Torque])),
            StrategyTag::MoeRaw => (vec![Vision, Proprio], Some(vec![RawTorque]), Some(vec![Vision, RawTorque])),
            StrategyTag::MoeGated => (vec![Vision, Proprio], Some(vec![Gated]), Some(vec![Vision, Gated])),
            StrategyTag::GatedCfg => (vec![Vision, Proprio], Some(vec![Gated, Proprio]), Some(vec![Gated, Vision])),
        };
        Layout { main, expert, mix }
    }

    fn all_blocks(&self) -> impl Iterator<Item = Block> + '_ {
        self.main
            .iter()
            .chain(self.expert.iter().flatten())
            .chain(self.mix.iter().flatten())
            .copied()
    }

    pub fn uses(&self, b: Block) -> bool {
        self.all_blocks().any(|x| x == b)
    }
}

fn block_width(b: Block, dims: &ModelDims) -> usize {
    match b {
        Block::RawTorque => dims.torque_len(),
        _ => FEATURE_DIM,
    }
}

fn blocks_width(blocks: &[Block], dims: &ModelDims) -> usize {
    blocks.iter().map(|b| block_width(*b, dims)).sum()
}

/// Non-trainable normalization statistics stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub vis_mean: ParamId,
    pub vis_std: ParamId,
    pub prop_mean: ParamId,
    pub prop_std: ParamId,
    /// Per joint, shared across history columns.
    pub tor_mean: ParamId,
    pub tor_std: ParamId,
    /// Per-dimension action bound; normalized actions live in [-1, 1].
    pub act_scale: ParamId,
    /// Future-torque statistics for the auxiliary target.
    pub ftor_mean: ParamId,
    pub ftor_std: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum Head {
    Single,
    Moe(Router),
    Cfg(ScalePredictor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub config: StrategyConfig,
    pub dims: ModelDims,
    pub layout: Layout,
    enc_vis: Encoder,
    enc_prop: Encoder,
    enc_tor: Option<Encoder>,
    f_star: Option<ParamId>,
    den_main: TemporalUnet,
    den_tor: Option<TemporalUnet>,
    head: Head,
    pub norm: Normalizer,
}

/// Normalized observation batch plus the contact gate of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch<T> {
    pub vis: Mat<T>,
    pub tor: Mat<T>,
    pub prop: Mat<T>,
    pub phi: Vec<bool>,
}

impl<T: Scalar> ObsBatch<T> {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

struct Features<T> {
    vis: Mat<T>,
    vis_c: MlpCache<T>,
    prop: Mat<T>,
    prop_c: MlpCache<T>,
    tor: Option<(Mat<T>, MlpCache<T>)>,
    gated: Option<Mat<T>>,
}

struct FeatureGrads<T> {
    vis: Mat<T>,
    prop: Mat<T>,
    tor: Mat<T>,
    gated: Mat<T>,
}

enum HeadCache<T> {
    Single,
    Moe {
        e_v: Mat<T>,
        e_t: Mat<T>,
        w: Vec<(T, T)>,
        mix_c: MlpCache<T>,
        tor_c: UnetCache<T>,
    },
    Cfg {
        e_v: Mat<T>,
        e_t: Mat<T>,
        w_scale: Vec<T>,
        w: Vec<T>,
        mix_c: MlpCache<T>,
        tor_c: UnetCache<T>,
    },
}

pub struct ForwardCache<T> {
    feats: Features<T>,
    main_c: UnetCache<T>,
    head: HeadCache<T>,
}

/// Per-row mixing quantities reported by the sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixWeights {
    None,
    Guidance { w_scale: f64, w_torque: f64 },
    Route { w_img: f64, w_tor: f64 },
}

impl PolicyModel {
    /// Builds the layout and freshly initialized parameters.
    pub fn new<T: Scalar>(config: StrategyConfig, dims: ModelDims, rng: &mut Rng) -> (PolicyModel, ParameterSet<T>) {
        let tag = config.tag;
        let layout = Layout::for_tag(tag);
        let mut b = Builder::<T>::new(rng);
        let enc_vis = Encoder::new(&mut b, "enc.vis", dims.visual, Modality::Vision);
        let enc_prop = Encoder::new(&mut b, "enc.prop", dims.joints, Modality::Proprio);
        let enc_tor = (layout.uses(Block::Torque) || layout.uses(Block::Gated))
            .then(|| Encoder::new(&mut b, "enc.tor", dims.torque_len(), Modality::Torque));
        let f_star = layout
            .uses(Block::Gated)
            .then(|| b.param("f_star", &[FEATURE_DIM], Init::Zeros));
        let in_ch = if tag == StrategyTag::AuxGoals {
            dims.action + dims.joints
        } else {
            dims.action
        };
        let unet = |cond: usize| UnetDims {
            horizon: dims.horizon,
            in_ch,
            c1: dims.c1,
            c2: dims.c2,
            temb: TEMB_DIM,
            cond,
        };
        let main_name = match tag {
            StrategyTag::VisionOnly => "den.vis",
            _ if tag.two_denoisers() => "den.vis",
            _ => "den.main",
        };
        let den_main = TemporalUnet::new(&mut b, main_name, unet(blocks_width(&layout.main, &dims)));
        let den_tor = layout
            .expert
            .as_ref()
            .map(|e| TemporalUnet::new(&mut b, "den.tor", unet(blocks_width(e, &dims))));
        let head = match (&layout.mix, tag) {
            (Some(_), StrategyTag::GatedCfg) => Head::Cfg(ScalePredictor::new(&mut b, "scale")),
            (Some(m), _) => Head::Moe(Router::new(&mut b, "router", blocks_width(m, &dims))),
            (None, _) => Head::Single,
        };
        let mut buf = |name: &str, n: usize, fill: f64| {
            let id = b.param(name, &[n], Init::Zeros);
            b.params.data_mut(id).fill(T::from_f64c(fill));
            id
        };
        let norm = Normalizer {
            vis_mean: buf("norm.vis.mean", dims.visual, 0.0),
            vis_std: buf("norm.vis.std", dims.visual, 1.0),
            prop_mean: buf("norm.prop.mean", dims.joints, 0.0),
            prop_std: buf("norm.prop.std", dims.joints, 1.0),
            tor_mean: buf("norm.tor.mean", dims.joints, 0.0),
            tor_std: buf("norm.tor.std", dims.joints, 1.0),
            act_scale: buf("norm.act.scale", dims.action, 1.0),
            ftor_mean: buf("norm.ftor.mean", dims.joints, 0.0),
            ftor_std: buf("norm.ftor.std", dims.joints, 1.0),
        };
        let params = b.finish();
        let model = PolicyModel {
            config,
            dims,
            layout,
            enc_vis,
            enc_prop,
            enc_tor,
            f_star,
            den_main,
            den_tor,
            head,
            norm,
        };
        (model, params)
    }

    pub fn tag(&self) -> StrategyTag {
        self.config.tag
    }

    /// Width of the denoised trajectory (actions, plus future torque in the
    /// auxiliary-goal strategy).
    pub fn traj_width(&self) -> usize {
        self.den_main.dims.in_ch
    }

    /// Per-column bound on the clean-sample estimate during sampling:
    /// actions live in `[-1, 1]`, auxiliary torque columns are z-scores.
    pub fn sample_clip(&self) -> Vec<f32> {
        let mut c = vec![1.0; self.dims.action];
        c.resize(self.traj_width(), AUX_CLIP);
        c
    }

    pub fn f_star_id(&self) -> Option<ParamId> {
        self.f_star
    }

    pub fn vision_encoder(&self) -> &Encoder {
        &self.enc_vis
    }

    pub fn proprio_encoder(&self) -> &Encoder {
        &self.enc_prop
    }

    pub fn torque_encoder(&self) -> Option<&Encoder> {
        self.enc_tor.as_ref()
    }

    pub fn main_denoiser(&self) -> &TemporalUnet {
        &self.den_main
    }

    pub fn torque_denoiser(&self) -> Option<&TemporalUnet> {
        self.den_tor.as_ref()
    }

    pub fn scale_predictor(&self) -> Option<&ScalePredictor> {
        match &self.head {
            Head::Cfg(s) => Some(s),
            _ => None,
        }
    }

    pub fn router(&self) -> Option<&Router> {
        match &self.head {
            Head::Moe(r) => Some(r),
            _ => None,
        }
    }

    /// Normalizes raw windows and evaluates the contact gate of each.
    pub fn observe<T: Scalar>(&self, p: &ParameterSet<T>, windows: &[&ObservationWindow]) -> Result<ObsBatch<T>> {
        let d = &self.dims;
        let n = windows.len();
        let mut vis = Mat::zeros(n, d.visual);
        let mut tor = Mat::zeros(n, d.torque_len());
        let mut prop = Mat::zeros(n, d.joints);
        let mut phi = Vec::with_capacity(n);
        let norm = |x: f32, m: T, s: T| (T::from_f64c(x as f64) - m) / s;
        for (i, w) in windows.iter().enumerate() {
            if w.visual.len() != d.visual || w.proprio.len() != d.joints || w.torque_history.data.len() != d.torque_len() {
                return Err(Error::Shape("observation window does not match model dimensions".into()));
            }
            let (vm, vs) = (p.data(self.norm.vis_mean), p.data(self.norm.vis_std));
            for (k, v) in vis.row_mut(i).iter_mut().enumerate() {
                *v = norm(w.visual[k], vm[k], vs[k]);
            }
            let (pm, ps) = (p.data(self.norm.prop_mean), p.data(self.norm.prop_std));
            for (k, v) in prop.row_mut(i).iter_mut().enumerate() {
                *v = norm(w.proprio[k], pm[k], ps[k]);
            }
            let (tm, ts) = (p.data(self.norm.tor_mean), p.data(self.norm.tor_std));
            for (k, v) in tor.row_mut(i).iter_mut().enumerate() {
                let j = k / d.history;
                *v = norm(w.torque_history.data[k], tm[j], ts[j]);
            }
            let latest: Vec<f32> = (0..d.joints)
                .map(|j| w.torque_history.data[j * d.history + d.history - 1])
                .collect();
            phi.push(detect_contact(&latest, self.config.gate_threshold)?.phi);
        }
        Ok(ObsBatch { vis, tor, prop, phi })
    }

    fn features<T: Scalar>(&self, p: &ParameterSet<T>, obs: &ObsBatch<T>) -> Features<T> {
        let (vis, vis_c) = self.enc_vis.mlp.forward(p, &obs.vis);
        let (prop, prop_c) = self.enc_prop.mlp.forward(p, &obs.prop);
        let tor = self.enc_tor.as_ref().map(|e| e.mlp.forward(p, &obs.tor));
        let gated = self.f_star.map(|id| {
            let (t, _) = tor.as_ref().expect("gated strategies encode torque");
            gate_rows(t, &obs.phi, p.data(id))
        });
        Features {
            vis,
            vis_c,
            prop,
            prop_c,
            tor,
            gated,
        }
    }

    fn assemble<T: Scalar>(&self, blocks: &[Block], f: &Features<T>, obs: &ObsBatch<T>) -> Mat<T> {
        let parts: Vec<&Mat<T>> = blocks
            .iter()
            .map(|b| match b {
                Block::Vision => &f.vis,
                Block::Proprio => &f.prop,
                Block::Torque => &f.tor.as_ref().expect("torque features").0,
                Block::Gated => f.gated.as_ref().expect("gated features"),
                Block::RawTorque => &obs.tor,
            })
            .collect();
        Mat::hcat(&parts)
    }

    fn scatter<T: Scalar>(&self, blocks: &[Block], d: &Mat<T>, g: &mut FeatureGrads<T>) {
        let widths: Vec<usize> = blocks.iter().map(|b| block_width(*b, &self.dims)).collect();
        for (b, part) in blocks.iter().zip(d.hsplit(&widths)) {
            match b {
                Block::Vision => g.vis.add_assign(&part),
                Block::Proprio => g.prop.add_assign(&part),
                Block::Torque => g.tor.add_assign(&part),
                Block::Gated => g.gated.add_assign(&part),
                Block::RawTorque => {}
            }
        }
    }

    fn temb<T: Scalar>(ts: &[usize]) -> Mat<T> {
        let mut m = Mat::zeros(ts.len(), TEMB_DIM);
        for (i, &t) in ts.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&timestep_embedding::<T>(t, TEMB_DIM));
        }
        m
    }

    /// Noise estimate for a batch plus everything needed for backprop.
    pub fn forward_train<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        obs: &ObsBatch<T>,
        x_t: &Mat<T>,
        ts: &[usize],
    ) -> (Mat<T>, ForwardCache<T>) {
        assert_eq!(ts.len(), obs.len(), "one timestep per sample");
        let feats = self.features(p, obs);
        let temb = Self::temb::<T>(ts);
        let cond = self.assemble(&self.layout.main, &feats, obs);
        let (e_main, main_c) = self.den_main.forward(p, x_t, &temb, &cond);
        let horizon = self.dims.horizon;
        let (eps, head) = match &self.head {
            Head::Single => (e_main, HeadCache::Single),
            Head::Moe(router) => {
                let den = self.den_tor.as_ref().expect("expert denoiser");
                let cond_t = self.assemble(self.layout.expert.as_ref().expect("expert"), &feats, obs);
                let (e_t, tor_c) = den.forward(p, x_t, &temb, &cond_t);
                let mix = self.assemble(self.layout.mix.as_ref().expect("mix"), &feats, obs);
                let (logits, mix_c) = router.mlp.forward(p, &mix);
                let w: Vec<(T, T)> = (0..obs.len()).map(|b| softmax2(logits.at(b, 0), logits.at(b, 1))).collect();
                let mut eps = Mat::zeros(e_main.rows, e_main.cols);
                for (b, &(wi, wt)) in w.iter().enumerate() {
                    let lo = b * horizon * eps.cols;
                    let hi = lo + horizon * eps.cols;
                    for i in lo..hi {
                        eps.data[i] = wi * e_main.data[i] + wt * e_t.data[i];
                    }
                }
                (
                    eps,
                    HeadCache::Moe {
                        e_v: e_main,
                        e_t,
                        w,
                        mix_c,
                        tor_c,
                    },
                )
            }
            Head::Cfg(scale) => {
                let den = self.den_tor.as_ref().expect("expert denoiser");
                let cond_t = self.assemble(self.layout.expert.as_ref().expect("expert"), &feats, obs);
                let (e_t, tor_c) = den.forward(p, x_t, &temb, &cond_t);
                let mix = self.assemble(self.layout.mix.as_ref().expect("mix"), &feats, obs);
                let (ws, mix_c) = scale.mlp.forward(p, &mix);
                let w_scale = ws.data.clone();
                let w: Vec<T> = w_scale
                    .iter()
                    .zip(&obs.phi)
                    .map(|(&s, &on)| if on { softplus(s) } else { T::zero() })
                    .collect();
                let mut eps = e_main.clone();
                for (b, &wb) in w.iter().enumerate() {
                    let lo = b * horizon * eps.cols;
                    let hi = lo + horizon * eps.cols;
                    for i in lo..hi {
                        eps.data[i] = e_main.data[i] + wb * (e_t.data[i] - e_main.data[i]);
                    }
                }
                (
                    eps,
                    HeadCache::Cfg {
                        e_v: e_main,
                        e_t,
                        w_scale,
                        w,
                        mix_c,
                        tor_c,
                    },
                )
            }
        };
        (eps, ForwardCache { feats, main_c, head })
    }

    /// Accumulates gradients of all participating parameters for
    /// `d_eps = ∂L/∂ε̂`.
    pub fn backward_train<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        obs: &ObsBatch<T>,
        cache: ForwardCache<T>,
        d_eps: &Mat<T>,
        g: &mut ParameterSet<T>,
    ) {
        let n = obs.len();
        let horizon = self.dims.horizon;
        let mut fg = FeatureGrads {
            vis: Mat::zeros(n, FEATURE_DIM),
            prop: Mat::zeros(n, FEATURE_DIM),
            tor: Mat::zeros(n, FEATURE_DIM),
            gated: Mat::zeros(n, FEATURE_DIM),
        };
        let ForwardCache { feats, main_c, head } = cache;
        let per_sample = |b: usize| b * horizon * d_eps.cols..(b + 1) * horizon * d_eps.cols;
        match head {
            HeadCache::Single => {
                let dc = self.den_main.backward(p, &main_c, d_eps, g);
                self.scatter(&self.layout.main, &dc, &mut fg);
            }
            HeadCache::Moe {
                e_v,
                e_t,
                w,
                mix_c,
                tor_c,
            } => {
                let mut de_v = Mat::zeros(d_eps.rows, d_eps.cols);
                let mut de_t = Mat::zeros(d_eps.rows, d_eps.cols);
                let mut dlogits = Mat::zeros(n, 2);
                for (b, &(wi, wt)) in w.iter().enumerate() {
                    let (mut dwi, mut dwt) = (T::zero(), T::zero());
                    for i in per_sample(b) {
                        de_v.data[i] = wi * d_eps.data[i];
                        de_t.data[i] = wt * d_eps.data[i];
                        dwi += d_eps.data[i] * e_v.data[i];
                        dwt += d_eps.data[i] * e_t.data[i];
                    }
                    let dl = wi * wt * (dwi - dwt);
                    dlogits.row_mut(b).copy_from_slice(&[dl, -dl]);
                }
                let router = self.router().expect("router");
                let dmix = router.mlp.backward(p, &mix_c, &dlogits, g, true).expect("dx");
                self.scatter(self.layout.mix.as_ref().expect("mix"), &dmix, &mut fg);
                let dc = self.den_main.backward(p, &main_c, &de_v, g);
                self.scatter(&self.layout.main, &dc, &mut fg);
                let den = self.den_tor.as_ref().expect("expert");
                let dc = den.backward(p, &tor_c, &de_t, g);
                self.scatter(self.layout.expert.as_ref().expect("expert"), &dc, &mut fg);
            }
            HeadCache::Cfg {
                e_v,
                e_t,
                w_scale,
                w,
                mix_c,
                tor_c,
            } => {
                let mut de_v = Mat::zeros(d_eps.rows, d_eps.cols);
                let mut de_t = Mat::zeros(d_eps.rows, d_eps.cols);
                let mut dws = Mat::zeros(n, 1);
                for (b, &wb) in w.iter().enumerate() {
                    let mut dw = T::zero();
                    for i in per_sample(b) {
                        de_v.data[i] = (T::one() - wb) * d_eps.data[i];
                        de_t.data[i] = wb * d_eps.data[i];
                        dw += d_eps.data[i] * (e_t.data[i] - e_v.data[i]);
                    }
                    if obs.phi[b] {
                        dws.data[b] = dw * sigmoid(w_scale[b]);
                    }
                }
                let scale = self.scale_predictor().expect("scale predictor");
                let dmix = scale.mlp.backward(p, &mix_c, &dws, g, true).expect("dx");
                self.scatter(self.layout.mix.as_ref().expect("mix"), &dmix, &mut fg);
                let dc = self.den_main.backward(p, &main_c, &de_v, g);
                self.scatter(&self.layout.main, &dc, &mut fg);
                let den = self.den_tor.as_ref().expect("expert");
                let dc = den.backward(p, &tor_c, &de_t, g);
                self.scatter(self.layout.expert.as_ref().expect("expert"), &dc, &mut fg);
            }
        }
        if let Some(id) = self.f_star {
            let d_tor_gated = gate_rows_backward(&fg.gated, &obs.phi, g.data_mut(id));
            fg.tor.add_assign(&d_tor_gated);
        }
        self.enc_vis.mlp.backward(p, &feats.vis_c, &fg.vis, g, false);
        self.enc_prop.mlp.backward(p, &feats.prop_c, &fg.prop, g, false);
        if let (Some(enc), Some((_, c))) = (&self.enc_tor, &feats.tor) {
            enc.mlp.backward(p, c, &fg.tor, g, false);
        }
    }
}

impl<T: Scalar> EpsModel<T> for PolicyModel {
    type Obs = ObsBatch<T>;
    type Cache = ForwardCache<T>;

    fn layout(&self) -> LossLayout {
        if self.tag() == StrategyTag::AuxGoals {
            LossLayout {
                action_cols: self.dims.action,
                aux_cols: self.dims.joints,
                aux_weight: self.config.alpha,
            }
        } else {
            LossLayout::actions_only(self.dims.action)
        }
    }

    fn forward(&self, p: &ParameterSet<T>, obs: &ObsBatch<T>, x_t: &Mat<T>, ts: &[usize]) -> (Mat<T>, ForwardCache<T>) {
        self.forward_train(p, obs, x_t, ts)
    }

    fn backward(&self, p: &ParameterSet<T>, obs: &ObsBatch<T>, cache: ForwardCache<T>, d_eps: &Mat<T>, g: &mut ParameterSet<T>) {
        self.backward_train(p, obs, cache, d_eps, g)
    }
}

/// Conditioning inputs prepared once per environment step and reused for
/// every denoising step.
pub struct StepConditioning<T> {
    film_main: Mat<T>,
    film_tor: Option<Mat<T>>,
    pub phi: Vec<bool>,
    pub mix: Vec<MixWeights>,
    w_torque: Vec<T>,
    w_route: Vec<(T, T)>,
}

/// Per-model constants for sampling: the timestep part of every FiLM
/// projection for all diffusion steps.
pub struct SamplerTables<T> {
    time_main: Vec<Mat<T>>,
    time_tor: Option<Vec<Mat<T>>>,
}

impl PolicyModel {
    pub fn sampler_tables<T: Scalar>(&self, p: &ParameterSet<T>, steps: usize) -> SamplerTables<T> {
        let table = |den: &TemporalUnet| -> Vec<Mat<T>> {
            (0..steps)
                .map(|t| {
                    let e = Mat::from_vec(1, TEMB_DIM, timestep_embedding::<T>(t, TEMB_DIM));
                    den.film_time_part(p, &e)
                })
                .collect()
        };
        SamplerTables {
            time_main: table(&self.den_main),
            time_tor: self.den_tor.as_ref().map(table),
        }
    }

    pub fn condition<T: Scalar>(&self, p: &ParameterSet<T>, obs: &ObsBatch<T>) -> StepConditioning<T> {
        let feats = self.features(p, obs);
        let cond = self.assemble(&self.layout.main, &feats, obs);
        let film_main = self.den_main.film_cond_part(p, &cond);
        let film_tor = self.den_tor.as_ref().map(|den| {
            let c = self.assemble(self.layout.expert.as_ref().expect("expert"), &feats, obs);
            den.film_cond_part(p, &c)
        });
        let n = obs.len();
        let mut mix = vec![MixWeights::None; n];
        let mut w_torque = vec![T::zero(); n];
        let mut w_route = vec![(T::one(), T::zero()); n];
        match &self.head {
            Head::Single => {}
            Head::Cfg(scale) => {
                let m = self.assemble(self.layout.mix.as_ref().expect("mix"), &feats, obs);
                let ws = scale.mlp.eval(p, &m);
                let cap = T::from_f64c(self.config.max_guidance);
                for b in 0..n {
                    let s = ws.data[b];
                    let w = if obs.phi[b] { softplus(s).min(cap) } else { T::zero() };
                    w_torque[b] = w;
                    mix[b] = MixWeights::Guidance {
                        w_scale: s.to_f64c(),
                        w_torque: w.to_f64c(),
                    };
                }
            }
            Head::Moe(router) => {
                let m = self.assemble(self.layout.mix.as_ref().expect("mix"), &feats, obs);
                let logits = router.mlp.eval(p, &m);
                for b in 0..n {
                    let (wi, wt) = softmax2(logits.at(b, 0), logits.at(b, 1));
                    w_route[b] = (wi, wt);
                    mix[b] = MixWeights::Route {
                        w_img: wi.to_f64c(),
                        w_tor: wt.to_f64c(),
                    };
                }
            }
        }
        StepConditioning {
            film_main,
            film_tor,
            phi: obs.phi.clone(),
            mix,
            w_torque,
            w_route,
        }
    }

    /// Blended noise estimate at diffusion step `t` for a batch whose
    /// conditioning was prepared with [`PolicyModel::condition`].
    pub fn predict_eps<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        tables: &SamplerTables<T>,
        c: &StepConditioning<T>,
        x_t: &Mat<T>,
        t: usize,
    ) -> Mat<T> {
        let film = |time: &Mat<T>, cond: &Mat<T>| -> Mat<T> {
            let mut f = cond.clone();
            for r in 0..f.rows {
                for (v, &tv) in f.row_mut(r).iter_mut().zip(time.row(0)) {
                    *v += tv;
                }
            }
            f
        };
        let e_v = self
            .den_main
            .forward_with_film(p, x_t, &film(&tables.time_main[t], &c.film_main));
        let Some(den) = &self.den_tor else {
            return e_v;
        };
        let time_tor = &tables.time_tor.as_ref().expect("expert table")[t];
        let film_tor = c.film_tor.as_ref().expect("expert conditioning");
        let horizon = self.dims.horizon;
        let width = e_v.cols;
        let mut out = e_v.clone();
        match &self.head {
            Head::Cfg(_) => {
                // Rows without contact have w = 0 and need no torque pass.
                if c.w_torque.iter().all(|w| *w == T::zero()) {
                    return e_v;
                }
                let e_t = den.forward_with_film(p, x_t, &film(time_tor, film_tor));
                for (b, &w) in c.w_torque.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    for i in b * horizon * width..(b + 1) * horizon * width {
                        out.data[i] = e_v.data[i] + w * (e_t.data[i] - e_v.data[i]);
                    }
                }
            }
            Head::Moe(_) => {
                let e_t = den.forward_with_film(p, x_t, &film(time_tor, film_tor));
                for (b, &(wi, wt)) in c.w_route.iter().enumerate() {
                    for i in b * horizon * width..(b + 1) * horizon * width {
                        out.data[i] = wi * e_v.data[i] + wt * e_t.data[i];
                    }
                }
            }
            Head::Single => {}
        }
        out
    }
}

/// Conditioning vectors of one batch, as fed to each network.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning<T> {
    /// Input of the main (or vision) denoiser.
    pub main: Mat<T>,
    /// Input of the torque denoiser, for two-denoiser strategies.
    pub expert: Option<Mat<T>>,
    /// Input of the router or scale predictor.
    pub mix: Option<Mat<T>>,
    pub phi: Vec<bool>,
}

impl PolicyModel {
    pub fn conditioning<T: Scalar>(&self, p: &ParameterSet<T>, obs: &ObsBatch<T>) -> Conditioning<T> {
        let feats = self.features(p, obs);
        Conditioning {
            main: self.assemble(&self.layout.main, &feats, obs),
            expert: self.layout.expert.as_ref().map(|b| self.assemble(b, &feats, obs)),
            mix: self.layout.mix.as_ref().map(|b| self.assemble(b, &feats, obs)),
            phi: obs.phi.clone(),
        }
    }
}
