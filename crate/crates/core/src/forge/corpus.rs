//! Procedural desk-scale corpus.
//!
//! Pristine "faces" are rendered from per-identity parameters with per-frame
//! jitter. A forgery takes generated content `I_g` from a second rendered
//! identity carrying periodic up-sampling artefacts and splices it into the
//! target through a component or whole-face mask.

use std::f32::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;
use crate::seed;

use super::composite::composite;
use super::image::{Image, ImageSample};
use super::io;
use super::manifest::{DatasetManifest, ManifestRecord, SourceTag, Split};
use super::mask::{synth_component_mask, FacialZone, Region, ShapeKind};
use super::sampling::split_by_rank;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub samples: usize,
    pub image_size: usize,
    pub fake_ratio: f64,
    /// Fraction of forgeries that replace the whole face.
    pub entire_fraction: f64,
    pub frames_per_group: usize,
    pub max_components: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Amplitude range of the generator artefact pattern.
    pub artifact_strength: [f32; 2],
    pub noise_sigma: f32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 250,
            image_size: 64,
            fake_ratio: 0.5,
            entire_fraction: 0.3,
            frames_per_group: 5,
            max_components: 3,
            n_train: 200,
            n_test: 50,
            artifact_strength: [0.035, 0.06],
            noise_sigma: 0.008,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.samples == 0 {
            return bad("corpus needs at least one sample".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} is below 16", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.fake_ratio) || !(0.0..=1.0).contains(&self.entire_fraction) {
            return bad("fake_ratio and entire_fraction must lie in [0, 1]".into());
        }
        if self.frames_per_group == 0 || self.max_components == 0 {
            return bad("frames_per_group and max_components must be positive".into());
        }
        let [lo, hi] = self.artifact_strength;
        if !(0.0..=1.0).contains(&lo) || hi < lo || hi > 1.0 {
            return bad(format!("artifact_strength [{lo}, {hi}] is not an interval in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        split_by_rank(self.samples, self.n_train, self.n_test).map(|_| ())
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("config serializes"));
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn n_fake(&self) -> usize {
        (0..self.samples).filter(|i| self.is_fake(*i)).count()
    }

    /// Spreads fakes evenly over the sample order so every rank split keeps
    /// roughly the global ratio; exactly `⌊n·ratio⌋` samples are fake.
    pub fn is_fake(&self, index: usize) -> bool {
        let r = self.fake_ratio;
        ((index + 1) as f64 * r).floor() > (index as f64 * r).floor()
    }

    pub fn group_of(&self, index: usize) -> usize {
        index / self.frames_per_group
    }
}

#[derive(Debug, Clone)]
struct Identity {
    family_b: bool,
    bg: [[f32; 3]; 2],
    bg_angle: f32,
    bg_wave: (f32, f32),
    skin: [f32; 3],
    face: (f32, f32, f32, f32),
    eye: [f32; 3],
    mouth: [f32; 3],
    light: (f32, f32),
}

fn jitter_color<R: Rng>(rng: &mut R, base: [f32; 3], spread: f32) -> [f32; 3] {
    base.map(|c| (c + rng.gen_range(-spread..=spread)).clamp(0.0, 1.0))
}

impl Identity {
    fn draw<R: Rng>(rng: &mut R, family_b: bool) -> Self {
        let (skin, bg0, bg1) = if family_b {
            ([0.66, 0.66, 0.74], [0.25, 0.30, 0.40], [0.45, 0.50, 0.60])
        } else {
            ([0.84, 0.64, 0.52], [0.80, 0.78, 0.70], [0.55, 0.65, 0.60])
        };
        Self {
            family_b,
            bg: [jitter_color(rng, bg0, 0.12), jitter_color(rng, bg1, 0.12)],
            bg_angle: rng.gen_range(0.0..2.0 * PI),
            bg_wave: (rng.gen_range(0.5..2.0), rng.gen_range(0.0..2.0 * PI)),
            skin: jitter_color(rng, skin, 0.08),
            face: (
                rng.gen_range(0.47..0.53),
                rng.gen_range(0.50..0.56),
                rng.gen_range(0.30..0.36),
                rng.gen_range(0.38..0.44),
            ),
            eye: jitter_color(rng, [0.20, 0.16, 0.14], 0.08),
            mouth: jitter_color(rng, [0.66, 0.30, 0.32], 0.08),
            light: (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)),
        }
    }

    /// Renders one frame: the identity shifted by `(dx, dy)` pixels with a
    /// global brightness gain, plus i.i.d. sensor noise.
    fn render(&self, size: usize, rng: &mut ChaCha8Rng, noise_sigma: f32) -> Image {
        let dx = rng.gen_range(-2.0f32..=2.0);
        let dy = rng.gen_range(-2.0f32..=2.0);
        let gain = rng.gen_range(0.97f32..=1.03);
        let noise = Normal::new(0.0f32, noise_sigma.max(1e-12)).expect("valid sigma");
        let s = size as f32;
        let (fcx, fcy, frx, fry) = self.face;
        let (fcx, fcy) = (fcx * s + dx, fcy * s + dy);
        let (frx, fry) = (frx * s, fry * s);
        let features = [
            (0.34, 0.38, 0.07, 0.035, self.eye),
            (0.66, 0.38, 0.07, 0.035, self.eye),
            (0.50, 0.77, 0.12, 0.035, self.mouth),
        ];
        let (ca, sa) = (self.bg_angle.cos(), self.bg_angle.sin());
        let mut data = Vec::with_capacity(size * size * 3);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 + 0.5) / s, (y as f32 + 0.5) / s);
                let t = ((u - 0.5) * ca + (v - 0.5) * sa + 0.5).clamp(0.0, 1.0);
                let wave = 0.04 * (self.bg_wave.0 * 2.0 * PI * (u + v) + self.bg_wave.1).sin();
                let mut px: [f32; 3] =
                    std::array::from_fn(|c| self.bg[0][c] * (1.0 - t) + self.bg[1][c] * t + wave);
                let ex = (x as f32 + 0.5 - fcx) / frx;
                let ey = (y as f32 + 0.5 - fcy) / fry;
                let r2 = ex * ex + ey * ey;
                if r2 <= 1.0 {
                    let shade = 1.0 + 0.15 * (self.light.0 * ex + self.light.1 * ey) - 0.12 * r2;
                    px = self.skin.map(|c| c * shade);
                    let nose = ((ex / 0.12).powi(2) + ((ey - 0.05) / 0.25).powi(2)) <= 1.0;
                    if nose {
                        px = px.map(|c| c * 0.9);
                    }
                    for (cxr, cyr, rxr, ryr, col) in features {
                        let fx = (x as f32 + 0.5 - (cxr * s + dx)) / (rxr * s);
                        let fy = (y as f32 + 0.5 - (cyr * s + dy)) / (ryr * s);
                        if fx * fx + fy * fy <= 1.0 {
                            px = col;
                        }
                    }
                }
                for c in px {
                    let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    data.push(c * gain + n);
                }
            }
        }
        let mut img = Image::new(size, size, 3, data).expect("rendered buffer has the right size");
        img.quantize();
        img
    }
}

/// Adds a period-2 checkerboard of amplitude `strength` and a small colour
/// cast, mimicking transposed-convolution up-sampling artefacts.
fn add_generator_artifacts<R: Rng>(img: &mut Image, strength: f32, rng: &mut R) {
    let cast: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..=0.03));
    let (w, c) = (img.width, img.channels);
    for (i, px) in img.data.chunks_mut(c).enumerate() {
        let (y, x) = (i / w, i % w);
        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        for (ch, v) in px.iter_mut().enumerate() {
            *v += sign * strength + cast[ch % 3];
        }
    }
    img.quantize();
}

fn identity_for(seed_val: u64, group: usize) -> Identity {
    let mut rng = seed::rng(seed::derive_indexed(seed_val, "identity", group as u64));
    Identity::draw(&mut rng, group % 2 == 1)
}

/// Generates sample `index` of the corpus in memory.
pub fn generate_sample(config: &CorpusConfig, seed_val: u64, index: usize) -> Result<ImageSample> {
    config.validate()?;
    if index >= config.samples {
        return Err(Error::Validation(format!("sample {index} is outside the corpus")));
    }
    let splits = split_by_rank(config.samples, config.n_train, config.n_test)?;
    let size = config.image_size;
    let group = config.group_of(index);
    let identity = identity_for(seed_val, group);
    let mut rng = seed::rng(seed::derive_indexed(seed_val, "sample", index as u64));
    let target = identity.render(size, &mut rng, config.noise_sigma);
    let group_id = format!("g{group:04}");

    if !config.is_fake(index) {
        let sample = ImageSample {
            image: target,
            mask: super::mask::ManipulationMask::zeros(size, size),
            label: 0,
            source_tag: if identity.family_b { SourceTag::RealB } else { SourceTag::RealA },
            group_id,
            split: splits[index],
        };
        sample.validate()?;
        return Ok(sample);
    }

    let donor_family_b = rng.gen_bool(0.5);
    let donor = Identity::draw(&mut rng, donor_family_b);
    let mut generated = donor.render(size, &mut rng, config.noise_sigma);
    let [lo, hi] = config.artifact_strength;
    let strength = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    add_generator_artifacts(&mut generated, strength, &mut rng);

    let entire = rng.gen_bool(config.entire_fraction);
    let regions: Vec<Region> = if entire {
        vec![Region::Zone { zone: FacialZone::Face, shape: ShapeKind::Ellipse }]
    } else {
        let k = rng.gen_range(1..=config.max_components.min(FacialZone::COMPONENTS.len()));
        let zones = rand::seq::index::sample(&mut rng, FacialZone::COMPONENTS.len(), k);
        zones
            .iter()
            .map(|z| Region::Zone {
                zone: FacialZone::COMPONENTS[z],
                shape: if rng.gen_bool(0.5) { ShapeKind::Ellipse } else { ShapeKind::Rect },
            })
            .collect()
    };
    let mask = synth_component_mask((size, size), &regions, rng.gen())?;
    let image = composite(&generated, &target, &mask)?;
    let sample = ImageSample {
        image,
        mask,
        label: 1,
        source_tag: if entire { SourceTag::SplicedEntire } else { SourceTag::SplicedPartial },
        group_id,
        split: splits[index],
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates the whole corpus under `out_dir` (images, masks and
/// `manifest.jsonl`) and returns the manifest.
pub fn build_desk_corpus(config: &CorpusConfig, seed_val: u64, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = exec::map_range(config.samples, |i| -> Result<ManifestRecord> {
        let sample = generate_sample(config, seed_val, i)?;
        let image_path = format!("images/{i:05}.png");
        let mask_path = format!("masks/{i:05}.png");
        io::save_image(&sample.image, &out_dir.join(&image_path))?;
        io::save_mask(&sample.mask, &out_dir.join(&mask_path))?;
        Ok(ManifestRecord {
            image_path,
            mask_path,
            label: sample.label,
            source_tag: sample.source_tag,
            group_id: sample.group_id,
            split: sample.split,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        seed: seed_val,
        config_hash: config.hash(),
        records,
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Counts of the split assignment, `(train, val, test)`.
pub fn split_counts(manifest: &DatasetManifest) -> (usize, usize, usize) {
    let n = |s: Split| manifest.records.iter().filter(|r| r.split == s).count();
    (n(Split::Train), n(Split::Val), n(Split::Test))
}
