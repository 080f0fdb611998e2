//! Datasets, episodic sampling, and the synthetic glyph corpus.
//!
//! A [`Dataset`] holds images tagged with a class id and one of three
//! horizontal splits (meta-train / meta-val / meta-test) whose class sets are
//! disjoint. [`sample_episode`] draws N-way K-shot tasks from one split;
//! [`consistent_eval_set`] freezes an ordered list of such tasks so that two
//! runs — serial or threaded, on any platform — evaluate on byte-identical
//! episodes. [`synth_generate`] renders a procedural corpus of class-defining
//! glyphs under three placement regimes, giving tests and desk runs a fully
//! reproducible image source with a known pixel-level ground truth.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::rng::{stream, Domain};

/// Base-label value carried by episodes drawn from splits whose classes are
/// outside the global classifier's label space.
pub const NO_BASE_LABEL: usize = usize::MAX;

/// Number of episodes in a frozen evaluation set when no count is given.
pub const DEFAULT_EVAL_EPISODES: usize = 1000;

/// Side of the square cell grid every glyph is drawn on.
pub const GLYPH_SIDE: usize = 6;

/// Smallest image extent the glyph renderer accepts.
pub const MIN_EXTENT: usize = 32;

/// Horizontal dataset partitions with mutually disjoint class sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];

    /// Directory name used by the on-disk image layout.
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        }
    }

    fn index(self) -> usize {
        match self {
            Split::MetaTrain => 0,
            Split::MetaVal => 1,
            Split::MetaTest => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Placement regime a synthetic image was rendered under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// One large glyph at the exact image center.
    SalientCentered,
    /// One small glyph at a uniform position, clean background.
    SmallClean,
    /// One small glyph plus dimmer glyphs of other classes.
    SmallWithDistractors,
}

#[derive(Debug)]
pub enum EpisodeError {
    EmptyDataset,
    PixelLength { index: usize, expected: usize, got: usize },
    ClassInTwoSplits { class: usize },
    RateOutOfRange { rate: f64 },
    HoldoutEmpty { class: usize, size: usize },
    BadEpisodeShape { way: usize, shot: usize, queries: usize },
    NotEnoughClasses { split: Split, need: usize, have: usize },
    NotEnoughImages { class: usize, need: usize, have: usize },
    ExtentNotDivisible { extent: usize },
    ExtentTooSmall { extent: usize },
    BadChannels { channels: usize },
    BadRegimeWeights { detail: String },
    NoiseOutOfRange { noise: f64 },
    Invariant { detail: String },
    Io { path: PathBuf, source: io::Error },
    Malformed { path: PathBuf, detail: String },
}

impl fmt::Display for EpisodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EpisodeError::EmptyDataset => write!(f, "dataset contains no images"),
            EpisodeError::PixelLength { index, expected, got } => write!(
                f,
                "image {index} holds {got} bytes, expected {expected} for its extent and channels"
            ),
            EpisodeError::ClassInTwoSplits { class } => {
                write!(f, "class {class} appears in more than one split")
            }
            EpisodeError::RateOutOfRange { rate } => {
                write!(f, "holdout rate {rate} is outside (0, 1)")
            }
            EpisodeError::HoldoutEmpty { class, size } => write!(
                f,
                "class {class} has {size} images, too few for a non-empty holdout at this rate"
            ),
            EpisodeError::BadEpisodeShape { way, shot, queries } => write!(
                f,
                "episode shape way={way} shot={shot} queries={queries} needs every field positive"
            ),
            EpisodeError::NotEnoughClasses { split, need, have } => {
                write!(f, "split {split} has {have} classes, {need} required")
            }
            EpisodeError::NotEnoughImages { class, need, have } => {
                write!(f, "class {class} has {have} images, {need} required")
            }
            EpisodeError::ExtentNotDivisible { extent } => {
                write!(f, "extent {extent} is not divisible by 16")
            }
            EpisodeError::ExtentTooSmall { extent } => {
                write!(f, "extent {extent} is below the {MIN_EXTENT} px rendering minimum")
            }
            EpisodeError::BadChannels { channels } => {
                write!(f, "channel count {channels} unsupported, expected 1 or 3")
            }
            EpisodeError::BadRegimeWeights { detail } => {
                write!(f, "invalid regime mix: {detail}")
            }
            EpisodeError::NoiseOutOfRange { noise } => {
                write!(f, "noise level {noise} is outside [0, 1)")
            }
            EpisodeError::Invariant { detail } => write!(f, "episode invariant violated: {detail}"),
            EpisodeError::Io { path, source } => {
                write!(f, "io error at {}: {source}", path.display())
            }
            EpisodeError::Malformed { path, detail } => {
                write!(f, "malformed input at {}: {detail}", path.display())
            }
        }
    }
}

impl Error for EpisodeError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            EpisodeError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// One image: raw 8-bit pixels plus its class, split, and (for synthetic
/// data) the regime it was rendered under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredImage {
    pub class: usize,
    pub split: Split,
    pub regime: Option<Regime>,
    /// Row-major bytes; for 3 channels, interleaved RGB per pixel.
    pub pixels: Vec<u8>,
}

/// An indexed image collection with split-disjoint class sets.
#[derive(Clone, Debug)]
pub struct Dataset {
    extent: usize,
    channels: usize,
    images: Vec<StoredImage>,
    by_class: BTreeMap<usize, Vec<usize>>,
    split_classes: [Vec<usize>; 3],
}

impl Dataset {
    /// Builds the index over `images`, validating pixel buffer sizes and
    /// that no class id straddles two splits.
    pub fn from_images(
        extent: usize,
        channels: usize,
        images: Vec<StoredImage>,
    ) -> Result<Self, EpisodeError> {
        if images.is_empty() {
            return Err(EpisodeError::EmptyDataset);
        }
        if channels != 1 && channels != 3 {
            return Err(EpisodeError::BadChannels { channels });
        }
        let expected = extent * extent * channels;
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut split_of: BTreeMap<usize, Split> = BTreeMap::new();
        for (index, image) in images.iter().enumerate() {
            if image.pixels.len() != expected {
                return Err(EpisodeError::PixelLength {
                    index,
                    expected,
                    got: image.pixels.len(),
                });
            }
            match split_of.insert(image.class, image.split) {
                Some(prev) if prev != image.split => {
                    return Err(EpisodeError::ClassInTwoSplits { class: image.class })
                }
                _ => {}
            }
            by_class.entry(image.class).or_default().push(index);
        }
        let mut split_classes: [Vec<usize>; 3] = Default::default();
        for (&class, &split) in &split_of {
            split_classes[split.index()].push(class);
        }
        Ok(Dataset { extent, channels, images, by_class, split_classes })
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, index: usize) -> &StoredImage {
        &self.images[index]
    }

    /// Ascending class ids of one split.
    pub fn classes_in(&self, split: Split) -> &[usize] {
        &self.split_classes[split.index()]
    }

    /// Ascending dataset indices of all images of `class`.
    pub fn images_of(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Classes the global classifier is trained over, ascending.
    pub fn base_classes(&self) -> &[usize] {
        self.classes_in(Split::MetaTrain)
    }

    /// Index of `class` within the global classifier's label space.
    pub fn base_index(&self, class: usize) -> Option<usize> {
        self.base_classes().binary_search(&class).ok()
    }

    /// Re-checks that every class id lives in exactly one split, so merged
    /// or externally loaded collections cannot leak classes across splits.
    pub fn audit(&self) -> Result<(), EpisodeError> {
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        for image in &self.images {
            match seen.insert(image.class, image.split) {
                Some(prev) if prev != image.split => {
                    return Err(EpisodeError::ClassInTwoSplits { class: image.class })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Pixels of one image scaled to `[0, 1]`, channel-planar, optionally
    /// mirrored left-right.
    pub fn pixels_scaled<E: Elem>(&self, index: usize, flip: bool) -> Vec<E> {
        let (s, c) = (self.extent, self.channels);
        let raw = &self.images[index].pixels;
        let mut out = Vec::with_capacity(c * s * s);
        for ch in 0..c {
            for y in 0..s {
                for x in 0..s {
                    let col = if flip { s - 1 - x } else { x };
                    out.push(E::lit(f64::from(raw[(y * s + col) * c + ch]) / 255.0));
                }
            }
        }
        out
    }
}

/// One member of an episode: an image index plus its episode-local label and
/// its index in the global classifier's label space ([`NO_BASE_LABEL`] for
/// splits outside that space).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSlot {
    pub image: usize,
    pub episode_label: usize,
    pub base_label: usize,
}

/// An N-way K-shot task: disjoint support and query sets over `way`
/// distinct classes, labels remapped to `0..way`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub task_id: u64,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    /// Drawn class ids; position = episode label.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeSlot>,
    pub query: Vec<EpisodeSlot>,
}

impl Episode {
    /// Checks every structural invariant against the dataset it was drawn
    /// from: distinct classes, exact support/query counts per label, label
    /// bijection onto `0..way`, support/query disjointness, and base-label
    /// consistency for `split`.
    pub fn validate(&self, dataset: &Dataset, split: Split) -> Result<(), EpisodeError> {
        let fail = |detail: String| Err(EpisodeError::Invariant { detail });
        if self.classes.len() != self.way {
            return fail(format!("{} classes drawn for way {}", self.classes.len(), self.way));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.way {
            return fail("duplicate class drawn".into());
        }
        if self.support.len() != self.way * self.shot {
            return fail(format!("support size {}", self.support.len()));
        }
        if self.query.len() != self.way * self.queries_per_class {
            return fail(format!("query size {}", self.query.len()));
        }
        let mut seen_images = std::collections::HashSet::new();
        let mut support_per_label = vec![0usize; self.way];
        let mut query_per_label = vec![0usize; self.way];
        for (slots, counts) in [
            (&self.support, &mut support_per_label),
            (&self.query, &mut query_per_label),
        ] {
            for slot in slots.iter() {
                if slot.episode_label >= self.way {
                    return fail(format!("label {} out of range", slot.episode_label));
                }
                counts[slot.episode_label] += 1;
                let image = dataset.image(slot.image);
                if image.split != split {
                    return fail(format!("image {} from split {}", slot.image, image.split));
                }
                if image.class != self.classes[slot.episode_label] {
                    return fail(format!(
                        "image {} of class {} filed under label {}",
                        slot.image, image.class, slot.episode_label
                    ));
                }
                let expected_base = match split {
                    Split::MetaTrain => dataset
                        .base_index(image.class)
                        .expect("meta-train class has a base index"),
                    _ => NO_BASE_LABEL,
                };
                if slot.base_label != expected_base {
                    return fail(format!("base label {} on image {}", slot.base_label, slot.image));
                }
                if !seen_images.insert(slot.image) {
                    return fail(format!("image {} drawn twice", slot.image));
                }
            }
        }
        if support_per_label.iter().any(|&n| n != self.shot) {
            return fail("uneven support counts".into());
        }
        if query_per_label.iter().any(|&n| n != self.queries_per_class) {
            return fail("uneven query counts".into());
        }
        Ok(())
    }
}

/// Image indices of the fit/holdout partition of the meta-train split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub fit: Vec<usize>,
    pub holdout: Vec<usize>,
}

/// Partitions every meta-train class into fit and holdout portions.
///
/// Each class is shuffled on its own `(seed, class)` stream, so the partition
/// of one class never depends on which other classes exist. The holdout takes
/// `floor(rate * n)` images; a class too small to yield a non-empty holdout
/// is an error rather than a silent skip.
pub fn horizontal_split(
    dataset: &Dataset,
    rate: f64,
    seed: u64,
) -> Result<SplitIndices, EpisodeError> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(EpisodeError::RateOutOfRange { rate });
    }
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    for &class in dataset.classes_in(Split::MetaTrain) {
        let mut indices = dataset.images_of(class).to_vec();
        let size = indices.len();
        let take = (rate * size as f64).floor() as usize;
        if take == 0 {
            return Err(EpisodeError::HoldoutEmpty { class, size });
        }
        let mut rng = stream(seed, Domain::HorizontalSplit, class as u64);
        indices.shuffle(&mut rng);
        holdout.extend_from_slice(&indices[..take]);
        fit.extend_from_slice(&indices[take..]);
    }
    fit.sort_unstable();
    holdout.sort_unstable();
    Ok(SplitIndices { fit, holdout })
}

/// Draws one N-way K-shot episode from `split` using `rng`.
///
/// Classes and images are sampled without replacement; support and query are
/// therefore disjoint even when `shot + queries_per_class` equals the class
/// size. Episode labels follow the draw order of the classes.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    rng: &mut ChaCha8Rng,
    task_id: u64,
) -> Result<Episode, EpisodeError> {
    if way == 0 || shot == 0 || queries_per_class == 0 {
        return Err(EpisodeError::BadEpisodeShape { way, shot, queries: queries_per_class });
    }
    let pool = dataset.classes_in(split);
    if pool.len() < way {
        return Err(EpisodeError::NotEnoughClasses { split, need: way, have: pool.len() });
    }
    let classes: Vec<usize> =
        sample_indices(rng, pool.len(), way).iter().map(|i| pool[i]).collect();
    let need = shot + queries_per_class;
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries_per_class);
    for (episode_label, &class) in classes.iter().enumerate() {
        let images = dataset.images_of(class);
        if images.len() < need {
            return Err(EpisodeError::NotEnoughImages { class, need, have: images.len() });
        }
        let base_label = match split {
            Split::MetaTrain => {
                dataset.base_index(class).expect("meta-train class has a base index")
            }
            _ => NO_BASE_LABEL,
        };
        let picks = sample_indices(rng, images.len(), need);
        for (slot, pick) in picks.iter().enumerate() {
            let member = EpisodeSlot { image: images[pick], episode_label, base_label };
            if slot < shot {
                support.push(member);
            } else {
                query.push(member);
            }
        }
    }
    Ok(Episode { task_id, way, shot, queries_per_class, classes, support, query })
}

/// Builds an ordered, frozen list of evaluation episodes.
///
/// Episode `i` is drawn from its own `(seed, split-domain, i)` stream, so the
/// list is identical regardless of platform, thread count, or how many other
/// episodes were materialized first.
pub fn consistent_eval_set(
    dataset: &Dataset,
    split: Split,
    way: usize,
    shot: usize,
    queries_per_class: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<Episode>, EpisodeError> {
    let domain = match split {
        Split::MetaTest => Domain::EvalEpisode,
        _ => Domain::ValEpisode,
    };
    (0..count)
        .map(|i| {
            let mut rng = stream(seed, domain, i as u64);
            sample_episode(dataset, split, way, shot, queries_per_class, &mut rng, i as u64)
        })
        .collect()
}

fn join_ids<I: IntoIterator<Item = usize>>(ids: I) -> String {
    ids.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Serializes episodes one per line: task id, class ids, support image
/// indices, query image indices. Two equal episode lists produce identical
/// bytes, which is what run manifests and shared-evaluation checks compare.
pub fn episode_manifest(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for e in episodes {
        out.push_str(&format!(
            "{} classes={} support={} query={}\n",
            e.task_id,
            join_ids(e.classes.iter().copied()),
            join_ids(e.support.iter().map(|s| s.image)),
            join_ids(e.query.iter().map(|s| s.image)),
        ));
    }
    out
}

const GLYPH_SALT: u64 = 0x676c_7970_68;

/// Deterministic horizontally symmetric cell pattern for a class id.
///
/// Symmetry makes mirror augmentation exactly label-preserving at the glyph
/// level. At least four of the eighteen free cells are always set, so no
/// glyph renders empty. `salt` perturbs the draw for collision fix-up.
pub fn glyph_pattern(class: usize, salt: u64) -> [[bool; GLYPH_SIDE]; GLYPH_SIDE] {
    let key = (class as u64) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ GLYPH_SALT;
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut cells = [[false; GLYPH_SIDE]; GLYPH_SIDE];
    let mut set = 0usize;
    for row in cells.iter_mut() {
        for col in 0..GLYPH_SIDE / 2 {
            if rng.gen_bool(0.5) {
                row[col] = true;
                row[GLYPH_SIDE - 1 - col] = true;
                set += 1;
            }
        }
    }
    'fill: for r in 0..GLYPH_SIDE {
        for c in 0..GLYPH_SIDE / 2 {
            if set >= 4 {
                break 'fill;
            }
            if !cells[r][c] {
                cells[r][c] = true;
                cells[r][GLYPH_SIDE - 1 - c] = true;
                set += 1;
            }
        }
    }
    cells
}

/// Assigns every class id a pattern distinct from all others in the list by
/// raising the salt of later ids until the collision disappears.
pub fn assign_patterns(class_ids: &[usize]) -> Vec<[[bool; GLYPH_SIDE]; GLYPH_SIDE]> {
    let mut patterns: Vec<[[bool; GLYPH_SIDE]; GLYPH_SIDE]> = Vec::with_capacity(class_ids.len());
    for &class in class_ids {
        let mut salt = 0u64;
        let mut pattern = glyph_pattern(class, salt);
        while patterns.contains(&pattern) {
            salt += 1;
            pattern = glyph_pattern(class, salt);
        }
        patterns.push(pattern);
    }
    patterns
}

/// Recipe for a procedural glyph corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Classes per split: meta-train, meta-val, meta-test.
    pub class_counts: [usize; 3],
    /// Images rendered per class, per split.
    pub images_per_class: [usize; 3],
    /// Square image side; must be a multiple of 16 and at least [`MIN_EXTENT`].
    pub extent: usize,
    /// 1 (grayscale) or 3 (gray replicated to RGB).
    pub channels: usize,
    /// Mix over the three [`Regime`] variants; must sum to one.
    pub regime_weights: [f64; 3],
    /// Additive uniform noise amplitude as a fraction of full scale.
    pub noise: f64,
    /// First class id; disjoint starts give disjoint glyph vocabularies.
    pub vocab_start: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// Desk-scale default corpus: 20 base / 5 validation / 5 test classes at
    /// 64 px grayscale with a balanced regime mix and mild noise.
    pub fn desk(seed: u64) -> Self {
        SynthSpec {
            class_counts: [20, 5, 5],
            images_per_class: [100, 50, 50],
            extent: 64,
            channels: 1,
            regime_weights: [0.34, 0.33, 0.33],
            noise: 0.08,
            vocab_start: 0,
            seed,
        }
    }

    /// Class id range of each split, in [`Split::ALL`] order.
    pub fn class_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.vocab_start;
        let b = a + self.class_counts[0];
        let c = b + self.class_counts[1];
        let d = c + self.class_counts[2];
        [a..b, b..c, c..d]
    }

    fn validate(&self) -> Result<(), EpisodeError> {
        if self.extent % 16 != 0 {
            return Err(EpisodeError::ExtentNotDivisible { extent: self.extent });
        }
        if self.extent < MIN_EXTENT {
            return Err(EpisodeError::ExtentTooSmall { extent: self.extent });
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(EpisodeError::BadChannels { channels: self.channels });
        }
        if self.regime_weights.iter().any(|&w| !(0.0..=1.0).contains(&w) || !w.is_finite()) {
            return Err(EpisodeError::BadRegimeWeights {
                detail: format!("weights {:?} outside [0, 1]", self.regime_weights),
            });
        }
        let sum: f64 = self.regime_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(EpisodeError::BadRegimeWeights {
                detail: format!("weights sum to {sum}, expected 1"),
            });
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(EpisodeError::NoiseOutOfRange { noise: self.noise });
        }
        if self.class_counts.iter().sum::<usize>() == 0 {
            return Err(EpisodeError::EmptyDataset);
        }
        for (count, per) in self.class_counts.iter().zip(&self.images_per_class) {
            if *count > 0 && *per == 0 {
                return Err(EpisodeError::EmptyDataset);
            }
        }
        if self.regime_weights[2] > 0.0 {
            for (split, &count) in Split::ALL.iter().zip(&self.class_counts) {
                if count == 1 {
                    return Err(EpisodeError::NotEnoughClasses {
                        split: *split,
                        need: 2,
                        have: 1,
                    });
                }
            }
        }
        Ok(())
    }
}

struct Box2 {
    top: usize,
    left: usize,
    side: usize,
}

impl Box2 {
    fn overlaps(&self, other: &Box2) -> bool {
        self.left < other.left + other.side
            && other.left < self.left + self.side
            && self.top < other.top + other.side
            && other.top < self.top + self.side
    }
}

fn scaled_side(extent: usize, frac: f64) -> usize {
    ((extent as f64 * frac).round() as usize).clamp(GLYPH_SIDE, extent)
}

fn render_glyph(
    canvas: &mut [u8],
    extent: usize,
    pattern: &[[bool; GLYPH_SIDE]; GLYPH_SIDE],
    at: &Box2,
    intensity: u8,
) {
    for py in 0..at.side {
        let cy = py * GLYPH_SIDE / at.side;
        for px in 0..at.side {
            let cx = px * GLYPH_SIDE / at.side;
            if pattern[cy][cx] {
                let pixel = &mut canvas[(at.top + py) * extent + (at.left + px)];
                *pixel = (*pixel).max(intensity);
            }
        }
    }
}

fn draw_regime(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> Regime {
    let u: f64 = rng.gen();
    if u < weights[0] {
        Regime::SalientCentered
    } else if u < weights[0] + weights[1] {
        Regime::SmallClean
    } else {
        Regime::SmallWithDistractors
    }
}

fn place_free(rng: &mut ChaCha8Rng, extent: usize, side: usize, avoid: &Box2) -> Box2 {
    let mut last = Box2 { top: 0, left: 0, side };
    for _ in 0..20 {
        last = Box2 {
            top: rng.gen_range(0..=extent - side),
            left: rng.gen_range(0..=extent - side),
            side,
        };
        if !last.overlaps(avoid) {
            return last;
        }
    }
    last
}

/// Renders the corpus described by `spec`.
///
/// Every image is drawn on its own `(seed, class, ordinal)` stream, so the
/// dataset is a pure function of the spec: same spec, same bytes. Class ids
/// are consecutive from `vocab_start` with split-disjoint ranges, and
/// distractor glyphs are always taken from other classes of the same split.
pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset, EpisodeError> {
    spec.validate()?;
    let ranges = spec.class_ranges();
    let all_ids: Vec<usize> = ranges.iter().flat_map(|r| r.clone()).collect();
    let patterns = assign_patterns(&all_ids);
    let pattern_of = |class: usize| &patterns[class - spec.vocab_start];
    let extent = spec.extent;
    let mut images = Vec::new();
    for (split, range) in Split::ALL.into_iter().zip(ranges.iter()) {
        let split_ids: Vec<usize> = range.clone().collect();
        for &class in &split_ids {
            for ordinal in 0..spec.images_per_class[split.index()] {
                let key = ((class as u64) << 16) | ordinal as u64;
                let mut rng = stream(spec.seed, Domain::SynthImage, key);
                let regime = draw_regime(&mut rng, &spec.regime_weights);
                let mut canvas = vec![0u8; extent * extent];
                let intensity = (rng.gen_range(0.82..1.0f64) * 255.0).round() as u8;
                let target = match regime {
                    Regime::SalientCentered => {
                        let side = scaled_side(extent, rng.gen_range(0.55..0.75));
                        Box2 { top: (extent - side) / 2, left: (extent - side) / 2, side }
                    }
                    Regime::SmallClean | Regime::SmallWithDistractors => {
                        let side = scaled_side(extent, rng.gen_range(0.20..0.30));
                        Box2 {
                            top: rng.gen_range(0..=extent - side),
                            left: rng.gen_range(0..=extent - side),
                            side,
                        }
                    }
                };
                if regime == Regime::SmallWithDistractors {
                    let own = split_ids.binary_search(&class).expect("class in own split");
                    for _ in 0..rng.gen_range(1..=3usize) {
                        let mut pick = rng.gen_range(0..split_ids.len() - 1);
                        if pick >= own {
                            pick += 1;
                        }
                        let side = scaled_side(extent, rng.gen_range(0.15..0.28));
                        let dim = (rng.gen_range(0.40..0.60f64) * 255.0).round() as u8;
                        let at = place_free(&mut rng, extent, side, &target);
                        render_glyph(&mut canvas, extent, pattern_of(split_ids[pick]), &at, dim);
                    }
                }
                render_glyph(&mut canvas, extent, pattern_of(class), &target, intensity);
                if spec.noise > 0.0 {
                    for pixel in canvas.iter_mut() {
                        let bump = (rng.gen::<f64>() * spec.noise * 255.0).round() as u8;
                        *pixel = pixel.saturating_add(bump);
                    }
                }
                let pixels = match spec.channels {
                    1 => canvas,
                    _ => canvas.iter().flat_map(|&v| [v, v, v]).collect(),
                };
                images.push(StoredImage { class, split, regime: Some(regime), pixels });
            }
        }
    }
    Dataset::from_images(extent, spec.channels, images)
}

fn write_raster(path: &Path, extent: usize, channels: usize, pixels: &[u8]) -> io::Result<()> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut bytes = format!("{magic}\n{extent} {extent}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)
}

fn read_raster(path: &Path) -> Result<(usize, usize, usize, Vec<u8>), EpisodeError> {
    let malformed = |detail: &str| EpisodeError::Malformed {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let bytes = fs::read(path)
        .map_err(|source| EpisodeError::Io { path: path.to_path_buf(), source })?;
    let mut pos = 0usize;
    let token = |bytes: &[u8], pos: &mut usize| -> Option<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (*pos > start).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&bytes, &mut pos).ok_or_else(|| malformed("missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(malformed(&format!("unsupported magic {other}"))),
    };
    let mut dim = |name: &str| -> Result<usize, EpisodeError> {
        token(&bytes, &mut pos)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| malformed(&format!("bad {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(malformed(&format!("maxval {maxval}, expected 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator after header"));
    }
    pos += 1;
    let payload = &bytes[pos..];
    if payload.len() != width * height * channels {
        return Err(malformed(&format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            width * height * channels
        )));
    }
    Ok((width, height, channels, payload.to_vec()))
}

/// Writes a dataset as `root/<split>/class_<id>/img_<n>.pgm` (or `.ppm`),
/// zero-padded so lexicographic order equals numeric order.
pub fn export_image_dir(dataset: &Dataset, root: &Path) -> Result<(), EpisodeError> {
    let io_at = |path: &Path| {
        let path = path.to_path_buf();
        move |source: io::Error| EpisodeError::Io { path, source }
    };
    let ext = if dataset.channels() == 1 { "pgm" } else { "ppm" };
    for split in Split::ALL {
        for &class in dataset.classes_in(split) {
            let dir = root.join(split.dir_name()).join(format!("class_{class:05}"));
            fs::create_dir_all(&dir).map_err(io_at(&dir))?;
            for (ordinal, &index) in dataset.images_of(class).iter().enumerate() {
                let path = dir.join(format!("img_{ordinal:05}.{ext}"));
                write_raster(&path, dataset.extent(), dataset.channels(), &dataset.image(index).pixels)
                    .map_err(io_at(&path))?;
            }
        }
    }
    Ok(())
}

/// Loads a dataset from the directory layout written by [`export_image_dir`].
///
/// Files are visited in lexicographic order, so a load of an exported
/// dataset reproduces it image for image. Extent and channel count must be
/// consistent across every file; an empty class directory is an error naming
/// the offending path.
pub fn load_image_dir(root: &Path) -> Result<Dataset, EpisodeError> {
    let sorted_entries = |dir: &Path| -> Result<Vec<PathBuf>, EpisodeError> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|source| EpisodeError::Io { path: dir.to_path_buf(), source })?
            .map(|e| e.map(|e| e.path()))
            .collect::<io::Result<_>>()
            .map_err(|source| EpisodeError::Io { path: dir.to_path_buf(), source })?;
        entries.sort();
        Ok(entries)
    };
    let mut images = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    let mut found_split = false;
    for split in Split::ALL {
        let split_dir = root.join(split.dir_name());
        if !split_dir.is_dir() {
            continue;
        }
        found_split = true;
        for class_dir in sorted_entries(&split_dir)? {
            let name = class_dir.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let class: usize = name
                .strip_prefix("class_")
                .and_then(|digits| digits.parse().ok())
                .filter(|_| class_dir.is_dir())
                .ok_or_else(|| EpisodeError::Malformed {
                    path: class_dir.clone(),
                    detail: "expected a class_<id> directory".into(),
                })?;
            let files = sorted_entries(&class_dir)?;
            if files.is_empty() {
                return Err(EpisodeError::Malformed {
                    path: class_dir.clone(),
                    detail: format!("class {class} directory has no images"),
                });
            }
            for file in files {
                let (width, height, channels, pixels) = read_raster(&file)?;
                if width != height {
                    return Err(EpisodeError::Malformed {
                        path: file,
                        detail: format!("{width}x{height} image is not square"),
                    });
                }
                match shape {
                    None => shape = Some((width, channels)),
                    Some(expected) if expected != (width, channels) => {
                        return Err(EpisodeError::Malformed {
                            path: file,
                            detail: format!(
                                "extent {width} channels {channels}, dataset uses extent {} channels {}",
                                expected.0, expected.1
                            ),
                        })
                    }
                    _ => {}
                }
                images.push(StoredImage { class, split, regime: None, pixels });
            }
        }
    }
    if !found_split {
        return Err(EpisodeError::Malformed {
            path: root.to_path_buf(),
            detail: "no split directories found".into(),
        });
    }
    let (extent, channels) = shape.ok_or(EpisodeError::EmptyDataset)?;
    Dataset::from_images(extent, channels, images)
}
