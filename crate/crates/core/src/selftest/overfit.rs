use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Model;
use crate::disparity::DisparityMap;
use crate::engine::AdamConfig;
use crate::error::Result;
use crate::net::train::{sample_triples, JointTrainer, StereoSample};
use crate::net::{normalize_image, NetConfig, SimilarityMode, StereoNet, DEFAULT_TAU};
use crate::synthetic::{generate_pair, SceneSpec, SyntheticPair};

/// Joint training on a single synthetic pair.
#[derive(Clone, Debug, PartialEq)]
pub struct OverfitConfig {
    pub scene: SceneSpec,
    pub net: NetConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub patch: usize,
    /// A loss line is logged every this many steps.
    pub log_every: usize,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            scene: SceneSpec::default(),
            // narrow enough for the single-core time budget, see README
            net: NetConfig {
                feature_widths: vec![12, 12, 12, 16],
                similarity_growth: 8,
                ..NetConfig::default()
            },
            steps: 1500,
            batch: 100,
            lr: 6.0e-5,
            patch: 21,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OverfitRun {
    pub pair: SyntheticPair,
    pub net: StereoNet<f32>,
    pub mode: SimilarityMode,
    /// Share of interior pixels whose WTA disparity is within 1 px.
    pub accuracy: f64,
    pub log: Vec<String>,
}

/// Share of pixels with `|d - gt| <= 1` over the interior
/// `x in [d_max + r, W - r)`, `y in [r, H - r)`; invalid pixels count as wrong.
pub fn interior_accuracy(map: &DisparityMap, gt: &DisparityMap, d_max: usize, radius: usize) -> f64 {
    let (w, h) = (gt.width(), gt.height());
    let (mut ok, mut n) = (0usize, 0usize);
    for y in radius..h.saturating_sub(radius) {
        for x in (d_max + radius)..w.saturating_sub(radius) {
            n += 1;
            if map.get(x, y).is_some_and(|d| (d - gt.value(x, y)).abs() <= 1.0) {
                ok += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}

/// Generates the pair and the initial network from `seed`, trains for
/// `cfg.steps` steps and scores the left WTA map. Both similarity modes see
/// the same pair, the same initial weights and the same triples.
pub fn overfit_pair(cfg: &OverfitConfig, mode: SimilarityMode, seed: u64) -> Result<OverfitRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = generate_pair(&cfg.scene, &mut rng)?;
    let net = Model::new(&cfg.net, rng.gen()).stereo;
    let samples = vec![StereoSample {
        left: normalize_image(&pair.left)?,
        right: normalize_image(&pair.right)?,
        gt: pair.gt.clone(),
    }];
    let mut trainer = JointTrainer::new(net, mode, AdamConfig::with_lr(cfg.lr));
    let mut log = Vec::new();
    let mut window = Vec::new();
    for step in 1..=cfg.steps {
        let batch = sample_triples(&samples, cfg.batch, cfg.patch, &mut rng)?;
        match trainer.step(&batch)?.loss() {
            Some(l) => window.push(l),
            None => log.push(format!("step {} skipped", step)),
        }
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let mean = window.iter().sum::<f64>() / window.len().max(1) as f64;
            log.push(format!("step {} loss {:.6}", step, mean));
            window.clear();
        }
    }
    let net = trainer.net;
    let out = net.disparity(&pair.left, &pair.right, cfg.scene.d_max, mode, DEFAULT_TAU)?;
    let accuracy = interior_accuracy(&out.left, &pair.gt, cfg.scene.d_max, cfg.patch / 2);
    log.push(format!("accuracy {:.6}", accuracy));
    Ok(OverfitRun {
        pair,
        net,
        mode,
        accuracy,
        log,
    })
}
