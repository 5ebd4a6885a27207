//! Backbone plus optional feature heads sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::heads::SiameseHeads;
use crate::params::ParamStore;
use crate::tensor::{argmax_channels, Tensor};
use crate::unet::{UNet, UNetConfig};

#[derive(Clone, Debug)]
pub struct Model {
    pub unet: UNet,
    /// Absent in inference-only models.
    pub heads: Option<SiameseHeads>,
    pub store: ParamStore,
}

/// Channel widths of F_1..F_n (bottleneck first).
pub fn feature_channels(unet: &UNetConfig, n: usize) -> Vec<usize> {
    let ch = unet.channels();
    (0..n.min(ch.len())).map(|i| ch[ch.len() - 1 - i]).collect()
}

impl Model {
    /// Freshly initialized from `cfg.seed`. Heads are built whenever `|F| > 0`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let unet = UNet::new(cfg.unet.clone(), &mut store, &mut rng)?;
        let heads = if cfg.feature_layers > 0 {
            let dims = feature_channels(&cfg.unet, cfg.feature_layers);
            Some(SiameseHeads::new(cfg.heads.clone(), &dims, &mut store, &mut rng)?)
        } else {
            None
        };
        Ok(Self { unet, heads, store })
    }

    /// Rebinds to a loaded store; heads are bound only if their parameters are present.
    pub fn from_store(cfg: &TrainConfig, store: ParamStore) -> Result<Self> {
        let unet = UNet::bind(cfg.unet.clone(), &store)?;
        let has_heads = store.iter().any(|(_, p)| p.name.starts_with("heads."));
        let heads = if has_heads && cfg.feature_layers > 0 {
            let dims = feature_channels(&cfg.unet, cfg.feature_layers);
            Some(SiameseHeads::bind(cfg.heads.clone(), &dims, &store)?)
        } else {
            None
        };
        Ok(Self { unet, heads, store })
    }

    pub fn n_classes(&self) -> usize {
        self.unet.config.n_classes
    }

    /// Score map `[n_classes, nz, ny, nx]` of a preprocessed sample.
    pub fn score_map(&self, sample: &VolumeSample) -> Result<Tensor> {
        if self.unet.config.in_channels != 1 {
            return Err(Error::InvalidInput("volume samples carry a single channel".into()));
        }
        self.unet.score_map(&self.store, &sample.image_f64(), sample.dims)
    }

    /// Argmax label grid of a preprocessed sample.
    pub fn predict(&self, sample: &VolumeSample) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.score_map(sample)?))
    }
}
