use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{NormCtx, NormScope};
use super::decoder::MaeDecoder;
use super::image::{ImageEncoder, ImageOutput};
use super::point::PointEncoder;
use super::{DecoderConfig, ImageEncoderConfig, PointEncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{BevFeatureMap, BevGridSpec, CameraRig, DepthBins, Points, SurroundLayout};
use crate::nn::{Bound, Param, ParamStore};
use crate::prompt::{PromptConfig, PromptContext, PromptRegistry};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub point: PointEncoderConfig,
    pub decoder: DecoderConfig,
    /// Standardized rig every dataset is mapped onto.
    pub camera: SurroundLayout,
    pub image_channels: usize,
    pub grid: BevGridSpec,
    pub depth: DepthBins,
    pub prompt: PromptConfig,
    /// Datasets that get a soft prompt.
    pub dataset_ids: Vec<u32>,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            point: PointEncoderConfig::default(),
            decoder: DecoderConfig::default(),
            camera: SurroundLayout::default(),
            image_channels: 1,
            grid: BevGridSpec::default(),
            depth: DepthBins::default(),
            prompt: PromptConfig::default(),
            dataset_ids: vec![0, 1],
            ln_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate(self.camera.height, self.camera.width)?;
        self.point.validate()?;
        self.grid.validate()?;
        self.depth.validate()?;
        let c = self.grid.feature_dim;
        if self.image.bev_feature_dim != c || self.point.bev_feature_dim != c {
            return Err(Error::Config(format!(
                "BEV feature widths disagree: image {}, point {}, grid {c}",
                self.image.bev_feature_dim, self.point.bev_feature_dim
            )));
        }
        if self.image_channels == 0 {
            return Err(Error::Config("image_channels must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!(
                "ln_eps must be positive, got {}",
                self.ln_eps
            )));
        }
        Ok(())
    }

    /// The nominal rig the model lifts image features through.
    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::surround(&self.camera, &[])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ForwardOptions {
    /// Overrides the configured mask ratio.
    pub mask_ratio: Option<f64>,
    pub mask_seed: u64,
}

pub struct ModelOutput {
    pub image: ImageOutput,
    /// Decoded patches, `[tokens, patch_len]`.
    pub recon: Var,
    pub bev_pcd: BevFeatureMap,
    /// Per-cell "holds at least one LiDAR point".
    pub occupancy: Vec<bool>,
}

/// Normalization layers by kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct NormAudit {
    pub backbone_sites: usize,
    pub backbone_prompt_norms: usize,
    pub backbone_plain_norms: usize,
    pub auxiliary_plain_norms: usize,
    pub adapters: usize,
}

/// Both backbones, the MAE decoder, the depth head, and the prompt registry,
/// all sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub registry: PromptRegistry,
    pub image: ImageEncoder,
    pub point: PointEncoder,
    pub decoder: MaeDecoder,
    rig: CameraRig,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let rig = cfg.rig()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(
            &cfg.image,
            cfg.camera.camera_count,
            cfg.camera.height,
            cfg.camera.width,
            cfg.image_channels,
            cfg.depth.count,
            &mut store,
            &mut rng,
        )?;
        let point = PointEncoder::new(&cfg.point, &cfg.grid, &mut store, &mut rng)?;
        let p = cfg.image.patch_size;
        let decoder = MaeDecoder::new(
            &cfg.decoder,
            cfg.image.embed_dim,
            cfg.camera.camera_count,
            image.layout().cells(),
            p * p * cfg.image_channels,
            &mut store,
            &mut rng,
        )?;
        // prompts come last so backbone init does not depend on them
        let sites: Vec<(String, usize)> = image
            .norms()
            .into_iter()
            .chain(point.norms())
            .filter(|n| n.scope == NormScope::Backbone)
            .map(|n| (n.site.clone(), n.width))
            .collect();
        let registry =
            PromptRegistry::new(&cfg.prompt, &cfg.dataset_ids, &sites, &mut store, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            registry,
            image,
            point,
            decoder,
            rig,
        })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// Same weights with the prompt registry switched off, so every backbone
    /// norm is plain LayerNorm.
    pub fn plain_twin(&self) -> Self {
        Self {
            registry: PromptRegistry::disabled(),
            ..self.clone()
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&Param) -> bool) -> Bound {
        self.store.bind(g, trainable)
    }

    pub fn norm_ctx(&self, prompt: PromptContext) -> NormCtx<'_> {
        NormCtx {
            registry: &self.registry,
            prompt,
            eps: self.cfg.ln_eps,
        }
    }

    pub fn image_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &Tensor,
        prompt: PromptContext,
        opts: &ForwardOptions,
    ) -> Result<ImageOutput> {
        let ratio = opts.mask_ratio.unwrap_or(self.cfg.image.mask_ratio);
        self.image.forward(
            g,
            p,
            images,
            &self.rig,
            &self.cfg.depth,
            &self.cfg.grid,
            self.norm_ctx(prompt),
            ratio,
            opts.mask_seed,
        )
    }

    pub fn point_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        points: &Points,
        prompt: PromptContext,
    ) -> Result<(BevFeatureMap, Vec<bool>)> {
        self.point
            .forward(g, p, points, &self.cfg.grid, self.norm_ctx(prompt))
    }

    pub fn mae_decode(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        self.decoder
            .forward(g, p, tokens, self.norm_ctx(PromptContext::Disabled))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        images: &Tensor,
        points: &Points,
        prompt: PromptContext,
        opts: &ForwardOptions,
    ) -> Result<ModelOutput> {
        let image = self.image_forward(g, p, images, prompt, opts)?;
        let recon = self.mae_decode(g, p, image.tokens)?;
        let (bev_pcd, occupancy) = self.point_forward(g, p, points, prompt)?;
        Ok(ModelOutput {
            image,
            recon,
            bev_pcd,
            occupancy,
        })
    }

    pub fn norm_audit(&self) -> NormAudit {
        let backbone: Vec<_> = self
            .image
            .norms()
            .into_iter()
            .chain(self.point.norms())
            .filter(|n| n.scope == NormScope::Backbone)
            .collect();
        let prompted = if self.registry.enabled {
            backbone
                .iter()
                .filter(|n| self.registry.has_site(&n.site))
                .count()
        } else {
            0
        };
        NormAudit {
            backbone_sites: backbone.len(),
            backbone_prompt_norms: prompted,
            backbone_plain_norms: backbone.len() - prompted,
            auxiliary_plain_norms: self.decoder.norms().len(),
            adapters: self.registry.adapter_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ModelConfig {
        ModelConfig {
            grid: BevGridSpec::new([-8.0, 8.0, -8.0, 8.0], 4, 16).unwrap(),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn audit_counts_match_registry() {
        let m = Model::new(&micro()).unwrap();
        let a = m.norm_audit();
        assert_eq!(a.backbone_sites, 6);
        assert_eq!(a.backbone_prompt_norms, a.adapters);
        assert_eq!(a.backbone_plain_norms, 0);
        let plain = m.plain_twin().norm_audit();
        assert_eq!(plain.backbone_prompt_norms, 0);
        assert_eq!(plain.backbone_plain_norms, 6);
    }

    #[test]
    fn mismatched_bev_widths_are_rejected() {
        let mut cfg = micro();
        cfg.point.bev_feature_dim = 8;
        assert!(matches!(Model::new(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn backbone_init_ignores_prompt_setting() {
        let a = Model::new(&micro()).unwrap();
        let mut cfg = micro();
        cfg.prompt.enabled = false;
        let b = Model::new(&cfg).unwrap();
        for (_, p) in b.store.iter() {
            assert!(
                a.store.by_name(&p.name).unwrap().value.bit_eq(&p.value),
                "{}",
                p.name
            );
        }
    }
}
