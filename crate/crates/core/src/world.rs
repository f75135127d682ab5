//! Synthetic scene world shared by the mock oracles.
//!
//! Every prompt id names a scene profile. A profile owns a poor-image latent,
//! a small per-dimension "actionable" lexicon, and an ideal plan drawn from
//! it. Each (dimension, content token) pair carries a fixed effect vector, so
//! applying a plan to the poor latent yields a good latent. The ideal plan's
//! result is the scene's target latent.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::grammar::{ActionPlan, Dimension, TokenId, VocabError, Vocabulary, NUM_DIMENSIONS};
use crate::rng;
use crate::PromptId;

/// Content vocabulary: one lexicon per dimension, a set of "new object"
/// tokens that the creativity judge forbids, and a no-change token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub dimensions: Vec<Vec<String>>,
    pub new_objects: Vec<String>,
    pub keep: String,
}

impl Default for Lexicon {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Lexicon {
            dimensions: vec![
                s(&[
                    "ratio-1:1",
                    "ratio-4:3",
                    "ratio-3:4",
                    "ratio-16:9",
                    "ratio-9:16",
                    "ratio-2:3",
                ]),
                s(&[
                    "rule-of-thirds",
                    "center-frame",
                    "leading-lines",
                    "crop-tighter",
                    "crop-wider",
                    "frame-within-frame",
                ]),
                s(&[
                    "low-angle",
                    "high-angle",
                    "eye-level",
                    "level-horizon",
                    "step-back",
                    "move-closer",
                ]),
                s(&[
                    "subject-left-third",
                    "subject-right-third",
                    "subject-center",
                    "lower-horizon",
                    "raise-horizon",
                    "more-headroom",
                ]),
                s(&[
                    "relax-shoulders",
                    "turn-three-quarter",
                    "chin-down",
                    "natural-walk",
                    "hands-in-motion",
                    "look-away",
                ]),
                s(&[
                    "shallow-dof",
                    "deep-dof",
                    "focus-eyes",
                    "blur-background",
                    "focus-foreground",
                    "sharpen-subject",
                ]),
                s(&[
                    "warm-tone",
                    "cool-tone",
                    "golden-light",
                    "lift-shadows",
                    "soften-highlights",
                    "backlight-glow",
                ]),
            ],
            new_objects: s(&["add-person", "add-tree", "add-building", "add-sky-element", "add-prop"]),
            keep: "keep".to_string(),
        }
    }
}

impl Lexicon {
    pub fn vocabulary(&self) -> Result<Vocabulary, VocabError> {
        Vocabulary::new(
            self.dimensions
                .iter()
                .flatten()
                .chain(self.new_objects.iter())
                .chain(std::iter::once(&self.keep))
                .cloned(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub num_profiles: u32,
    pub latent_dim: usize,
    /// Standard deviation of each per-token effect vector.
    pub effect_scale: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_profiles: 16,
            latent_dim: 8,
            effect_scale: 0.5,
            seed: 2026,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneProfile {
    pub id: PromptId,
    pub poor_latent: Vec<f64>,
    /// Two actionable tokens per dimension; the ideal plan uses the first.
    pub actionable: Vec<Vec<TokenId>>,
    pub forbidden: Vec<TokenId>,
    pub ideal_plan: ActionPlan,
    pub target_latent: Vec<f64>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("lexicon needs {NUM_DIMENSIONS} dimension lists with at least two tokens each")]
    BadLexicon,
    #[error("world needs at least one profile and a positive latent dimension")]
    BadConfig,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    profiles: Vec<SceneProfile>,
    /// effects[dimension - 1][token id] in latent space.
    effects: Vec<Vec<Vec<f64>>>,
}

fn gaussian(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl World {
    pub fn generate(lexicon: Lexicon, config: WorldConfig) -> Result<Self, WorldError> {
        if lexicon.dimensions.len() != NUM_DIMENSIONS || lexicon.dimensions.iter().any(|d| d.len() < 2) {
            return Err(WorldError::BadLexicon);
        }
        if config.num_profiles == 0 || config.latent_dim == 0 {
            return Err(WorldError::BadConfig);
        }
        let vocab = lexicon.vocabulary()?;
        let d = config.latent_dim;
        let keep = vocab.id(&lexicon.keep);

        let mut erng = rng::stream(config.seed, "world/effects", 0);
        let effects: Vec<Vec<Vec<f64>>> = (0..NUM_DIMENSIONS)
            .map(|_| {
                (0..vocab.len())
                    .map(|i| {
                        let v = gaussian(&mut erng, d, config.effect_scale);
                        if vocab.is_delimiter(TokenId(i as u32)) || Some(TokenId(i as u32)) == keep {
                            vec![0.0; d]
                        } else {
                            v
                        }
                    })
                    .collect()
            })
            .collect();

        let forbidden: Vec<TokenId> = lexicon.new_objects.iter().filter_map(|w| vocab.id(w)).collect();

        let mut world = World {
            config: config.clone(),
            lexicon,
            vocab,
            profiles: Vec::new(),
            effects,
        };

        for p in 0..config.num_profiles {
            let mut prng = rng::stream(config.seed, "world/profile", u64::from(p));
            let poor_latent = gaussian(&mut prng, d, 1.0);
            let actionable: Vec<Vec<TokenId>> = world
                .lexicon
                .dimensions
                .iter()
                .map(|words| {
                    let mut ids: Vec<TokenId> = words.iter().filter_map(|w| world.vocab.id(w)).collect();
                    ids.shuffle(&mut prng);
                    ids.truncate(2);
                    ids
                })
                .collect();
            let contents: [Vec<TokenId>; NUM_DIMENSIONS] = std::array::from_fn(|k| vec![actionable[k][0]]);
            let ideal_plan =
                ActionPlan::from_contents(&world.vocab, contents).expect("ideal plan is well formed by construction");
            let target_latent = world.apply(&poor_latent, &ideal_plan);
            world.profiles.push(SceneProfile {
                id: PromptId(p),
                poor_latent,
                actionable,
                forbidden: forbidden.clone(),
                ideal_plan,
                target_latent,
            });
        }
        Ok(world)
    }

    pub fn profiles(&self) -> &[SceneProfile] {
        &self.profiles
    }

    pub fn profile(&self, p: PromptId) -> Option<&SceneProfile> {
        self.profiles.get(p.0 as usize)
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Adds the effect of every content token to `base`.
    pub fn apply(&self, base: &[f64], plan: &ActionPlan) -> Vec<f64> {
        let mut out = base.to_vec();
        for seg in plan.segments() {
            for &t in &seg.content {
                let e = &self.effects[seg.dimension.index() - 1][t.index()];
                out.iter_mut().zip(e).for_each(|(o, x)| *o += x);
            }
        }
        out
    }

    /// Variant 0 is the ideal plan; other variants swap one or two
    /// dimensions to the profile's alternative actionable token.
    pub fn variant_plan(&self, p: PromptId, variant: u32) -> Option<ActionPlan> {
        let prof = self.profile(p)?;
        if variant == 0 {
            return Some(prof.ideal_plan.clone());
        }
        let mut r = rng::stream(
            self.config.seed,
            "world/variant",
            (u64::from(p.0) << 32) | u64::from(variant),
        );
        let mut contents: [Vec<TokenId>; NUM_DIMENSIONS] = std::array::from_fn(|k| vec![prof.actionable[k][0]]);
        let changes = 1 + (variant as usize % 2);
        let mut dims: Vec<usize> = (0..NUM_DIMENSIONS).collect();
        dims.shuffle(&mut r);
        for &k in dims.iter().take(changes) {
            contents[k] = vec![prof.actionable[k][1]];
        }
        ActionPlan::from_contents(&self.vocab, contents).ok()
    }

    /// Nearest scene target to a latent: (prompt, euclidean distance).
    pub fn nearest_target(&self, x: &[f64]) -> (PromptId, f64) {
        self.profiles
            .iter()
            .map(|p| (p.id, l2(x, &p.target_latent)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("world has at least one profile")
    }

    pub fn dimension_of(&self, t: TokenId) -> Option<Dimension> {
        let text = self.vocab.text(t)?;
        self.lexicon
            .dimensions
            .iter()
            .position(|words| words.iter().any(|w| w == text))
            .and_then(|i| Dimension::from_index(i + 1))
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
