//! The stereo network: siamese feature extractor, learned similarity head,
//! cost volume with winner-takes-all, and left-right consistency filtering.

pub mod features;
pub mod layers;
pub mod similarity;
pub mod train;
pub mod volume;

use rand::Rng;

use crate::disparity::DisparityMap;
use crate::engine::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

pub use features::{normalize_image, FeatureExtractor};
pub use layers::{Bound, ConvLayer, Module};
pub use similarity::{SimilarityHead, SimilarityNet};
pub use volume::{
    build_cost_volume, cosine_similarity_volume, lr_consistency, wta_disparity, CostVolume, Direction,
};

/// Channel widths of all three networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    /// Output channels of each feature layer; the last is the feature dimension.
    pub feature_widths: Vec<usize>,
    pub similarity_growth: usize,
    pub similarity_layers: usize,
    pub deformable: bool,
    /// Hidden widths of the two inner completion convolutions.
    pub dc_widths: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            feature_widths: vec![60; 4],
            similarity_growth: 24,
            similarity_layers: 5,
            deformable: true,
            dc_widths: [32, 32],
        }
    }
}

/// How candidate pairs are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    Trained,
    /// Cosine of the raw feature vectors (ablation).
    Cosine,
}

/// Default left-right threshold.
pub const DEFAULT_TAU: f32 = 1.1;

/// Feature extractor plus similarity network.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoNet<T> {
    pub features: FeatureExtractor<T>,
    pub similarity: SimilarityNet<T>,
}

/// Disparity maps produced for one stereo pair.
#[derive(Clone, Debug)]
pub struct StereoOutput {
    pub left: DisparityMap,
    pub right: DisparityMap,
    /// Left map after the consistency check.
    pub consistent: DisparityMap,
}

impl<T: Scalar> StereoNet<T> {
    pub fn new<R: Rng + ?Sized>(config: &NetConfig, rng: &mut R) -> Self {
        let features = FeatureExtractor::new(&config.feature_widths, rng);
        let similarity = SimilarityNet::new(
            features.feature_dim(),
            config.similarity_growth,
            config.similarity_layers,
            config.deformable,
            rng,
        );
        StereoNet { features, similarity }
    }

    /// Patch side that the full network reduces to a single score.
    pub fn patch_size(&self) -> usize {
        self.features.receptive_field() + self.similarity.receptive_field() - 1
    }

    pub fn param_count(&self) -> usize {
        self.features.param_count() + self.similarity.param_count()
    }

    /// Left/right cost volumes for raw (unnormalised) images.
    pub fn cost_volumes(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        d_max: usize,
        mode: SimilarityMode,
    ) -> Result<(CostVolume<T>, CostVolume<T>)> {
        let fl = self.features.extract(&normalize_image(left)?)?;
        let fr = self.features.extract(&normalize_image(right)?)?;
        let build = |r: &Tensor<T>, o: &Tensor<T>, dir| match mode {
            SimilarityMode::Trained => build_cost_volume(&self.similarity, r, o, d_max, dir),
            SimilarityMode::Cosine => cosine_similarity_volume(r, o, d_max, dir),
        };
        Ok((build(&fl, &fr, Direction::LeftReference)?, build(&fr, &fl, Direction::RightReference)?))
    }

    /// WTA disparities for both views and the consistency-checked left map.
    pub fn disparity(
        &self,
        left: &Tensor<T>,
        right: &Tensor<T>,
        d_max: usize,
        mode: SimilarityMode,
        tau: f32,
    ) -> Result<StereoOutput> {
        let (vl, vr) = self.cost_volumes(left, right, d_max, mode)?;
        let left = wta_disparity(&vl);
        let right = wta_disparity(&vr);
        let consistent = lr_consistency(&left, &right, tau)?;
        Ok(StereoOutput {
            left,
            right,
            consistent,
        })
    }
}

impl<T: Scalar> Module<T> for StereoNet<T> {
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.features.named_params();
        v.extend(self.similarity.named_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.features.params_mut();
        v.extend(self.similarity.params_mut());
        v
    }
}
