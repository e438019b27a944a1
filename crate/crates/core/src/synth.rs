//! Synthetic panoramic scenes with planted groups and consistent
//! three-granularity labels.
//!
//! Individuals render as Gaussian blobs whose texture is a linear code over
//! fixed low-frequency patterns, one channel/pattern pair per individual
//! action class (amplitude +1 when the class is present, -1 when absent).
//! Group members share a spatial locus and drift along a direction set by
//! the group's smallest activity label. Global labels come from a fixed
//! lookup table over the set of social labels present in the clip.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::featmap::BoxTrack;
use crate::grouping::{Partition, RelationMatrix};
use crate::heads::{LabelSet, LabelTaxonomy};
use crate::tensor::Tensor;

/// Generation parameters.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub clips: usize,
    pub members_min: usize,
    pub members_max: usize,
    pub frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub groups_min: usize,
    pub groups_max: usize,
    pub taxonomy: LabelTaxonomy,
    /// Blob drift per frame, pixels.
    pub motion: f64,
    /// Additive pixel noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            clips: 8,
            members_min: 4,
            members_max: 10,
            frames: 3,
            frame_h: 64,
            frame_w: 64,
            groups_min: 2,
            groups_max: 3,
            taxonomy: LabelTaxonomy::default(),
            motion: 1.5,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.members_min == 0 || self.members_min > self.members_max {
            return Err(Error::Config("invalid member range".into()));
        }
        if self.groups_min == 0 || self.groups_min > self.groups_max {
            return Err(Error::Config("invalid group range".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.frame_h < 2 * BOX_SIDE as usize || self.frame_w < 2 * BOX_SIDE as usize {
            return Err(Error::Config(format!(
                "frame must be at least {0}x{0}",
                2 * BOX_SIDE as usize
            )));
        }
        self.taxonomy.validate()?;
        if self.taxonomy.individual > 3 * PATTERNS.len() {
            return Err(Error::Config(format!(
                "at most {} individual classes are renderable",
                3 * PATTERNS.len()
            )));
        }
        if self.motion < 0.0 || self.noise < 0.0 {
            return Err(Error::Config("motion and noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One training/evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: u64,
    pub seed: u64,
    /// `[T,3,H,W]`, values quantized to f32 precision.
    pub frames: Tensor,
    pub boxes: Vec<BoxTrack>,
    pub individual_labels: Vec<LabelSet>,
    pub partition: Partition,
    /// Per group, aligned with `partition.groups()`.
    pub social_labels: Vec<LabelSet>,
    pub global_labels: LabelSet,
    pub relation: RelationMatrix,
}

impl ClipSample {
    pub fn member_count(&self) -> usize {
        self.boxes.len()
    }
}

pub const BOX_SIDE: f64 = 14.0;
const BLOB_SIGMA: f64 = 2.5;
const LOCUS_SEPARATION: f64 = 18.0;
const MEMBER_SPREAD: f64 = 7.0;
const SAME_GROUP_SEPARATION: f64 = 6.5;
const CROSS_GROUP_SEPARATION: f64 = 10.0;
const PLACEMENT_ATTEMPTS: usize = 200;
const PLACEMENT_RESTARTS: usize = 200;

fn sample_coord(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        (lo + hi) / 2.0
    }
}

/// Rejection-sample `count` loci pairwise at least `LOCUS_SEPARATION` apart,
/// restarting from scratch when a draw paints itself into a corner.
fn place_loci(
    rng: &mut ChaCha8Rng,
    count: usize,
    lo: f64,
    hi_x: f64,
    hi_y: f64,
) -> Option<Vec<(f64, f64)>> {
    'restart: for _ in 0..PLACEMENT_RESTARTS {
        let mut loci: Vec<(f64, f64)> = Vec::with_capacity(count);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = sample_coord(rng, lo, hi_x);
                let y = sample_coord(rng, lo, hi_y);
                if loci.iter().all(|&(lx, ly)| {
                    ((lx - x).powi(2) + (ly - y).powi(2)).sqrt() >= LOCUS_SEPARATION
                }) {
                    loci.push((x, y));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Some(loci);
    }
    None
}

/// Place member centers around their group loci with minimum separations,
/// restarting the whole arrangement when stuck.
fn place_members(
    rng: &mut ChaCha8Rng,
    loci: &[(f64, f64)],
    group_of: &[usize],
    lo: f64,
    hi_x: f64,
    hi_y: f64,
) -> Option<Vec<(f64, f64)>> {
    let n = group_of.len();
    'restart: for _ in 0..PLACEMENT_RESTARTS {
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
        for i in 0..n {
            let (lx, ly) = loci[group_of[i]];
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x = (lx + rng.random_range(-MEMBER_SPREAD..MEMBER_SPREAD)).clamp(lo, hi_x.max(lo));
                let y = (ly + rng.random_range(-MEMBER_SPREAD..MEMBER_SPREAD)).clamp(lo, hi_y.max(lo));
                let ok = centers.iter().enumerate().all(|(j, &(cx, cy))| {
                    let min_sep = if group_of[j] == group_of[i] {
                        SAME_GROUP_SEPARATION
                    } else {
                        CROSS_GROUP_SEPARATION
                    };
                    ((cx - x).powi(2) + (cy - y).powi(2)).sqrt() >= min_sep
                });
                if ok {
                    centers.push((x, y));
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Some(centers);
    }
    None
}

/// Low-frequency pattern table; class `l` renders into channel `l % 3` with
/// pattern `PATTERNS[l / 3]` over box-relative coordinates in `[0,1]`.
const PATTERNS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// Pattern value at box-relative coordinates.
pub fn pattern_value(index: usize, u: f64, v: f64) -> f64 {
    let (kx, ky) = PATTERNS[index];
    (std::f64::consts::PI * kx as f64 * u).cos() * (std::f64::consts::PI * ky as f64 * v).cos()
}

/// Channel and pattern index for an individual class.
pub fn class_signal(class: usize) -> (usize, usize) {
    (class % 3, class / 3)
}

/// Fixed global-label lookup: entry per nonempty subset of social labels.
///
/// The table key is the presence bitmask of social labels across all groups;
/// the entry always contains `mask % c_global` and, for odd masks, also
/// `(mask / c_global) % c_global`.
pub fn global_label_table(c_social: usize, c_global: usize) -> Vec<LabelSet> {
    let mut table = Vec::with_capacity(1 << c_social);
    for mask in 0..(1usize << c_social) {
        let mut set = LabelSet::new();
        set.insert(mask % c_global);
        if mask % 2 == 1 {
            set.insert((mask / c_global) % c_global);
        }
        table.push(set);
    }
    table
}

fn random_label_set(rng: &mut ChaCha8Rng, classes: usize, max_count: usize) -> LabelSet {
    let count = rng.random_range(1..=max_count.min(classes));
    let mut pool: Vec<usize> = (0..classes).collect();
    pool.shuffle(rng);
    pool.into_iter().take(count).collect()
}

/// Deterministically generate one clip.
pub fn generate_clip(spec: &GenSpec, id: u64, seed: u64) -> Result<ClipSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_frames = spec.frames;
    let (h, w) = (spec.frame_h, spec.frame_w);

    let n = rng.random_range(spec.members_min..=spec.members_max);
    let group_count = rng.random_range(spec.groups_min..=spec.groups_max).min(n);

    // group memberships: shuffle members, cut into nonempty runs
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cuts: Vec<usize> = (1..n).collect();
    cuts.shuffle(&mut rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(group_count - 1).collect();
    cuts.sort_unstable();
    let mut raw_groups = Vec::with_capacity(group_count);
    let mut start = 0;
    for &cut in cuts.iter().chain(std::iter::once(&n)) {
        raw_groups.push(order[start..cut].to_vec());
        start = cut;
    }
    let partition = Partition::new(raw_groups, n)?;

    // labels (after canonicalization so the assignment is stable)
    let individual_labels: Vec<LabelSet> = (0..n)
        .map(|_| random_label_set(&mut rng, spec.taxonomy.individual, 3))
        .collect();
    let social_labels: Vec<LabelSet> = (0..partition.len())
        .map(|_| random_label_set(&mut rng, spec.taxonomy.social, 2))
        .collect();
    let mut social_mask = 0usize;
    for set in &social_labels {
        for &l in set {
            social_mask |= 1 << l;
        }
    }
    let global_labels =
        global_label_table(spec.taxonomy.social, spec.taxonomy.global)[social_mask].clone();

    // geometry: loci far apart, members jittered around their locus, boxes
    // sized so the blob stays inside while drifting
    let max_drift = spec.motion * (t_frames.saturating_sub(1)) as f64 / 2.0;
    let margin = BOX_SIDE / 2.0 + 1.0 + max_drift;
    let locus_lo = margin + MEMBER_SPREAD;
    let loci = place_loci(
        &mut rng,
        partition.len(),
        locus_lo,
        w as f64 - locus_lo,
        h as f64 - locus_lo,
    )
    .ok_or_else(|| {
        Error::InvalidInput("infeasible packing: could not separate group loci".into())
    })?;

    let group_of = partition.labels();
    let centers = place_members(
        &mut rng,
        &loci,
        &group_of,
        margin,
        w as f64 - margin,
        h as f64 - margin,
    )
    .ok_or_else(|| Error::InvalidInput("infeasible packing: could not place members".into()))?;

    // group motion: direction from the group's smallest social label
    let velocities: Vec<(f64, f64)> = (0..partition.len())
        .map(|gi| {
            let lead = *social_labels[gi].iter().next().unwrap();
            let angle =
                2.0 * std::f64::consts::PI * lead as f64 / spec.taxonomy.social as f64;
            (spec.motion * angle.cos(), spec.motion * angle.sin())
        })
        .collect();

    // boxes are fixed per individual (blob drifts inside); midpoint-centered
    let mid = (t_frames.saturating_sub(1)) as f64 / 2.0;
    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let (vx, vy) = velocities[group_of[i]];
        let cx = centers[i].0 + mid * vx;
        let cy = centers[i].1 + mid * vy;
        let half = BOX_SIDE / 2.0;
        let rect = [
            (cx - half).max(0.0),
            (cy - half).max(0.0),
            (cx + half).min(w as f64),
            (cy + half).min(h as f64),
        ];
        boxes.push(BoxTrack::new(i, vec![rect; t_frames], w, h)?);
    }

    // render
    let mut frames = vec![0.0f64; t_frames * 3 * h * w];
    for t in 0..t_frames {
        for i in 0..n {
            let (vx, vy) = velocities[group_of[i]];
            let bx = centers[i].0 + t as f64 * vx;
            let by = centers[i].1 + t as f64 * vy;
            let [rx1, ry1, rx2, ry2] = boxes[i].boxes[t];
            let x_lo = rx1.floor().max(0.0) as usize;
            let x_hi = (rx2.ceil() as usize).min(w);
            let y_lo = ry1.floor().max(0.0) as usize;
            let y_hi = (ry2.ceil() as usize).min(h);
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    let fx = px as f64 + 0.5;
                    let fy = py as f64 + 0.5;
                    let envelope = (-((fx - bx).powi(2) + (fy - by).powi(2))
                        / (2.0 * BLOB_SIGMA * BLOB_SIGMA))
                        .exp();
                    if envelope < 1e-4 {
                        continue;
                    }
                    let u = (fx - rx1) / (rx2 - rx1);
                    let v = (fy - ry1) / (ry2 - ry1);
                    for class in 0..spec.taxonomy.individual {
                        let (ch, pat) = class_signal(class);
                        let amp = if individual_labels[i].contains(&class) {
                            1.0
                        } else {
                            -1.0
                        };
                        frames[((t * 3 + ch) * h + py) * w + px] +=
                            0.5 * amp * envelope * pattern_value(pat, u, v);
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).unwrap();
        for v in frames.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    // quantize to f32 so in-memory clips equal their serialized form
    for v in frames.iter_mut() {
        *v = *v as f32 as f64;
    }

    let relation = RelationMatrix::from_partition(&partition);
    Ok(ClipSample {
        id,
        seed,
        frames: Tensor::new(vec![t_frames, 3, h, w], frames)?,
        boxes,
        individual_labels,
        partition,
        social_labels,
        global_labels,
        relation,
    })
}

/// A fully random probe clip for gradient checking: random frames, random
/// in-bounds boxes, a fixed two-group partition. Unlike `generate_clip` it
/// has no geometric minimums, so it works at arbitrarily small frames.
pub fn probe_clip(
    taxonomy: &LabelTaxonomy,
    frame_h: usize,
    frame_w: usize,
    members: usize,
    frames: usize,
    seed: u64,
) -> Result<ClipSample> {
    if members == 0 || frames == 0 || frame_h < 4 || frame_w < 4 {
        return Err(Error::Config("probe clip needs members, frames, dims >= 4".into()));
    }
    taxonomy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel = frames * 3 * frame_h * frame_w;
    let frames_t = Tensor::new(
        vec![frames, 3, frame_h, frame_w],
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let mut boxes = Vec::with_capacity(members);
    for i in 0..members {
        let side = 3.0 + rng.random_range(0.0..(frame_w.min(frame_h) as f64 / 2.0 - 3.0));
        let x1 = rng.random_range(0.2..(frame_w as f64 - side - 0.2));
        let y1 = rng.random_range(0.2..(frame_h as f64 - side - 0.2));
        let rect = [x1, y1, x1 + side, y1 + side];
        boxes.push(BoxTrack::new(i, vec![rect; frames], frame_w, frame_h)?);
    }

    let groups: Vec<Vec<usize>> = if members == 1 {
        vec![vec![0]]
    } else {
        let split = members / 2;
        vec![(0..split).collect(), (split..members).collect()]
    };
    let partition = Partition::new(groups, members)?;
    let relation = RelationMatrix::from_partition(&partition);

    let mut pick = |classes: usize| -> LabelSet {
        let mut set = LabelSet::new();
        set.insert(rng.random_range(0..classes));
        if rng.random_bool(0.5) {
            set.insert(rng.random_range(0..classes));
        }
        set
    };
    let individual_labels = (0..members).map(|_| pick(taxonomy.individual)).collect();
    let social_labels = (0..partition.len()).map(|_| pick(taxonomy.social)).collect();
    let global_labels = pick(taxonomy.global);

    Ok(ClipSample {
        id: 0,
        seed,
        frames: frames_t,
        boxes,
        individual_labels,
        partition,
        social_labels,
        global_labels,
        relation,
    })
}

/// Generate `spec.clips` clips with per-clip seeds derived from the spec seed.
pub fn generate_dataset(spec: &GenSpec) -> Result<Vec<ClipSample>> {
    (0..spec.clips)
        .map(|i| {
            let clip_seed = spec
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(i as u64 + 1);
            generate_clip(spec, i as u64, clip_seed)
        })
        .collect()
}
