//! Concept-driven toy world with four paired modalities.
//!
//! Every sample is rendered from a [`Concept`] (one of 8 classes plus a
//! continuous style in `[0, 1]`):
//!
//! * text: 8 tokens over a vocabulary of 16: `[class, class + 8, style bucket, 5 filler tokens]`
//! * image: 8x8 pixels in `[0, 1]` showing a bar at angle `class * 22.5` degrees
//! * audio: 32 samples in `[-1, 1]`, a sinusoid with `class + 1` cycles
//! * video: 4 frames of the image pattern moving 1 pixel per frame, right for
//!   even classes and down for odd ones
//!
//! Style sets the bar intensity / sinusoid amplitude (`0.5 + 0.5 * style`).

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const VOCAB: usize = 16;
pub const TEXT_LEN: usize = 8;
pub const IMAGE_SIDE: usize = 8;
pub const AUDIO_LEN: usize = 32;
pub const VIDEO_FRAMES: usize = 4;
pub const STYLE_BUCKETS: usize = 8;
pub const RENDER_NOISE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Text, Modality::Image, Modality::Audio, Modality::Video];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }

    pub fn payload_dims(self) -> &'static [usize] {
        match self {
            Modality::Text => &[TEXT_LEN],
            Modality::Image => &[IMAGE_SIDE, IMAGE_SIDE],
            Modality::Audio => &[AUDIO_LEN],
            Modality::Video => &[VIDEO_FRAMES, IMAGE_SIDE, IMAGE_SIDE],
        }
    }

    pub fn payload_len(self) -> usize {
        self.payload_dims().iter().product()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concept {
    pub class_id: usize,
    pub style: f64,
}

impl Concept {
    pub fn new(class_id: usize, style: f64) -> Result<Self> {
        if class_id >= NUM_CLASSES || !(0.0..=1.0).contains(&style) {
            return Err(Error::InvalidArgument(format!(
                "concept out of range: class {class_id}, style {style}"
            )));
        }
        Ok(Self { class_id, style })
    }

    pub fn random(rng: &mut SeededRng) -> Self {
        Self {
            class_id: rng.below(NUM_CLASSES),
            // f32-representable so the dataset file stores it exactly.
            style: rng.uniform() as f32 as f64,
        }
    }

    pub fn style_bucket(&self) -> usize {
        ((self.style * STYLE_BUCKETS as f64) as usize).min(STYLE_BUCKETS - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub modality: Modality,
    pub payload: Tensor<f32>,
    pub concept: Concept,
}

impl Sample {
    pub fn tokens(&self) -> Vec<usize> {
        self.payload.data().iter().map(|&t| t as usize).collect()
    }
}

pub fn render(concept: Concept, modality: Modality, rng: &mut SeededRng) -> Sample {
    render_with_noise(concept, modality, RENDER_NOISE, rng)
}

/// Render with an explicit pixel/sample noise level (0 gives the clean template).
pub fn render_with_noise(concept: Concept, modality: Modality, noise: f64, rng: &mut SeededRng) -> Sample {
    let data: Vec<f64> = match modality {
        Modality::Text => {
            let mut toks = vec![concept.class_id, concept.class_id + NUM_CLASSES, concept.style_bucket()];
            toks.extend((0..TEXT_LEN - 3).map(|_| rng.below(VOCAB)));
            toks.into_iter().map(|t| t as f64).collect()
        }
        Modality::Image => {
            let mut img = bar_image(concept, 0.0, 0.0);
            add_noise(&mut img, noise, 0.0, 1.0, rng);
            img
        }
        Modality::Audio => {
            let amp = 0.5 + 0.5 * concept.style;
            let cycles = (concept.class_id + 1) as f64;
            let mut wave: Vec<f64> = (0..AUDIO_LEN)
                .map(|n| amp * (2.0 * std::f64::consts::PI * cycles * (n as f64 + 0.5) / AUDIO_LEN as f64).sin())
                .collect();
            add_noise(&mut wave, noise, -1.0, 1.0, rng);
            wave
        }
        Modality::Video => {
            let mut frames = Vec::with_capacity(modality.payload_len());
            for f in 0..VIDEO_FRAMES {
                let offset = f as f64 - (VIDEO_FRAMES as f64 - 1.0) / 2.0;
                let (dx, dy) = if concept.class_id % 2 == 0 { (offset, 0.0) } else { (0.0, offset) };
                frames.extend(bar_image(concept, dx, dy));
            }
            add_noise(&mut frames, noise, 0.0, 1.0, rng);
            frames
        }
    };
    Sample {
        modality,
        payload: Tensor::new(modality.payload_dims().to_vec(), data.into_iter().map(|v| v as f32).collect())
            .expect("payload dims are static"),
        concept,
    }
}

fn bar_image(concept: Concept, shift_x: f64, shift_y: f64) -> Vec<f64> {
    let theta = (concept.class_id as f64 * 22.5).to_radians();
    let (s, c) = theta.sin_cos();
    let centre = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    let intensity = 0.5 + 0.5 * concept.style;
    let mut img = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for r in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let dx = col as f64 - centre - shift_x;
            let dy = r as f64 - centre - shift_y;
            let along = dx * c + dy * s;
            let perp = -dx * s + dy * c;
            if perp.abs() <= 0.75 && along.abs() <= 3.0 {
                img[r * IMAGE_SIDE + col] = intensity;
            }
        }
    }
    img
}

fn add_noise(xs: &mut [f64], std: f64, lo: f64, hi: f64, rng: &mut SeededRng) {
    if std > 0.0 {
        for x in xs.iter_mut() {
            *x = (*x + std * rng.normal()).clamp(lo, hi);
        }
    }
}

/// Which unordered modality pairs exist as paired training data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingPolicy {
    pub allowed_pairs: BTreeSet<(Modality, Modality)>,
}

fn ordered(a: Modality, b: Modality) -> (Modality, Modality) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Default for PairingPolicy {
    fn default() -> Self {
        use Modality::*;
        Self::from_pairs(&[(Text, Image), (Text, Audio), (Text, Video), (Audio, Video)])
    }
}

impl PairingPolicy {
    pub fn from_pairs(pairs: &[(Modality, Modality)]) -> Self {
        Self {
            allowed_pairs: pairs.iter().map(|&(a, b)| ordered(a, b)).collect(),
        }
    }

    pub fn allows(&self, a: Modality, b: Modality) -> bool {
        self.allowed_pairs.contains(&ordered(a, b))
    }

    pub fn check(&self, a: Modality, b: Modality) -> Result<()> {
        if self.allows(a, b) {
            return Ok(());
        }
        let allowed: Vec<String> = self.allowed_pairs.iter().map(|(x, y)| format!("{x}-{y}")).collect();
        Err(Error::Policy(format!(
            "no paired {a}-{b} data exists; paired data is available only for {}",
            allowed.join(", ")
        )))
    }
}

/// `n` concept draws, each rendered into both modalities of `pair`.
pub fn make_batch(
    policy: &PairingPolicy,
    pair: (Modality, Modality),
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(Sample, Sample)>> {
    policy.check(pair.0, pair.1)?;
    Ok((0..n)
        .map(|_| {
            let c = Concept::random(rng);
            (render(c, pair.0, rng), render(c, pair.1, rng))
        })
        .collect())
}

/// Single-modality samples with random concepts.
pub fn make_samples(modality: Modality, n: usize, rng: &mut SeededRng) -> Vec<Sample> {
    (0..n).map(|_| render(Concept::random(rng), modality, rng)).collect()
}

/// Human-readable rendering: token ids, a character-ramp grid per image or
/// frame, or the waveform values.
pub fn ascii(sample: &Sample) -> String {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let grid = |px: &[f32]| -> String {
        px.chunks(IMAGE_SIDE)
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        let i = (v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32).round() as usize;
                        RAMP[i] as char
                    })
                    .collect::<String>()
                    + "\n"
            })
            .collect()
    };
    let data = sample.payload.data();
    match sample.modality {
        Modality::Text => {
            let ids: Vec<String> = data.iter().map(|&t| (t as usize).to_string()).collect();
            ids.join(" ") + "\n"
        }
        Modality::Image => grid(data),
        Modality::Video => data
            .chunks(IMAGE_SIDE * IMAGE_SIDE)
            .enumerate()
            .map(|(f, px)| format!("frame {f}\n{}", grid(px)))
            .collect(),
        Modality::Audio => {
            let vals: Vec<String> = data.iter().map(|v| format!("{v:+.3}")).collect();
            vals.join(" ") + "\n"
        }
    }
}

// ---- dataset file ------------------------------------------------------

const DATASET_MAGIC: &[u8; 4] = b"CDS1";

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.push(s.modality.tag());
        out.push(s.concept.class_id as u8);
        out.extend_from_slice(&(s.concept.style as f32).to_le_bytes());
        match s.modality {
            Modality::Text => out.extend(s.payload.data().iter().map(|&t| t as u8)),
            _ => s.payload.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

fn sample_bytes(m: Modality) -> usize {
    let per = if m == Modality::Text { 1 } else { 4 };
    m.payload_len() * per
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    if bytes.len() < 8 {
        return Err(Error::Truncated {
            expected: 8,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected CDS1".into(),
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut off = 8;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        if bytes.len() < off + 6 {
            return Err(Error::Truncated {
                expected: off + 6,
                actual: bytes.len(),
            });
        }
        let modality = Modality::from_tag(bytes[off]).ok_or_else(|| Error::Format {
            offset: off,
            msg: format!("unknown modality tag {}", bytes[off]),
        })?;
        let class_id = bytes[off + 1] as usize;
        let style = f32::from_le_bytes(bytes[off + 2..off + 6].try_into().unwrap()) as f64;
        let concept = Concept::new(class_id, style).map_err(|e| Error::Format {
            offset: off + 1,
            msg: e.to_string(),
        })?;
        off += 6;
        let need = sample_bytes(modality);
        if bytes.len() < off + need {
            return Err(Error::Truncated {
                expected: off + need,
                actual: bytes.len(),
            });
        }
        let raw = &bytes[off..off + need];
        let data: Vec<f32> = if modality == Modality::Text {
            raw.iter().map(|&b| b as f32).collect()
        } else {
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        off += need;
        out.push(Sample {
            modality,
            payload: Tensor::new(modality.payload_dims().to_vec(), data)?,
            concept,
        });
    }
    if off != bytes.len() {
        return Err(Error::Format {
            offset: off,
            msg: format!("{} trailing bytes after {count} samples", bytes.len() - off),
        });
    }
    Ok(out)
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    crate::checkpoint::write_atomic(path, &encode_dataset(samples))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_bar_for_class_zero() {
        let s = render_with_noise(Concept::new(0, 1.0).unwrap(), Modality::Image, 0.0, &mut SeededRng::new(0));
        let px = s.payload.data();
        for r in 0..IMAGE_SIDE {
            for c in 0..IMAGE_SIDE {
                let v = px[r * IMAGE_SIDE + c];
                let on = (r == 3 || r == 4) && (1..=6).contains(&c);
                assert_eq!(v, if on { 1.0 } else { 0.0 }, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn audio_cycle_count_matches_class() {
        for class_id in 0..NUM_CLASSES {
            let s = render_with_noise(Concept::new(class_id, 0.3).unwrap(), Modality::Audio, 0.0, &mut SeededRng::new(0));
            let x = s.payload.data();
            let sign_changes = x.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count();
            // k full cycles sampled off the zeros give 2k - 1 interior sign changes.
            assert_eq!((sign_changes + 1) / 2, class_id + 1);
        }
    }

    #[test]
    fn text_layout_and_ranges() {
        let mut rng = SeededRng::new(1);
        for _ in 0..50 {
            let c = Concept::random(&mut rng);
            let t = render(c, Modality::Text, &mut rng);
            let toks = t.tokens();
            assert_eq!(toks.len(), TEXT_LEN);
            assert_eq!(toks[0], c.class_id);
            assert_eq!(toks[1], c.class_id + 8);
            assert_eq!(toks[2], c.style_bucket());
            assert!(toks.iter().all(|&k| k < VOCAB));
            for m in [Modality::Image, Modality::Video] {
                assert!(render(c, m, &mut rng).payload.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(render(c, Modality::Audio, &mut rng).payload.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn video_moves_one_pixel_per_frame() {
        let s = render_with_noise(Concept::new(2, 1.0).unwrap(), Modality::Video, 0.0, &mut SeededRng::new(0));
        let px = s.payload.data();
        let frame = |f: usize| &px[f * 64..(f + 1) * 64];
        let centroid_x = |img: &[f32]| {
            let w: f32 = img.iter().sum();
            img.iter().enumerate().map(|(i, v)| (i % 8) as f32 * v).sum::<f32>() / w
        };
        // Class 2 is even: the pattern moves right.
        for f in 0..3 {
            assert!((centroid_x(frame(f + 1)) - centroid_x(frame(f)) - 1.0).abs() < 0.35);
        }
    }

    #[test]
    fn render_is_deterministic() {
        let c = Concept::new(5, 0.4).unwrap();
        for m in Modality::ALL {
            let a = render(c, m, &mut SeededRng::new(9));
            let b = render(c, m, &mut SeededRng::new(9));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batches_share_concepts_and_respect_policy() {
        let policy = PairingPolicy::default();
        let mut rng = SeededRng::new(2);
        let batch = make_batch(&policy, (Modality::Text, Modality::Image), 16, &mut rng).unwrap();
        assert_eq!(batch.len(), 16);
        assert!(batch.iter().all(|(a, b)| a.concept == b.concept));
        let err = make_batch(&policy, (Modality::Image, Modality::Audio), 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Policy(_)));
        assert!(err.to_string().contains("image-audio"));
        assert!(!policy.allows(Modality::Video, Modality::Image));
    }

    #[test]
    fn class_histogram_is_uniform() {
        let mut rng = SeededRng::new(3);
        let batch = make_batch(&PairingPolicy::default(), (Modality::Text, Modality::Audio), 8000, &mut rng).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        batch.iter().for_each(|(a, _)| counts[a.concept.class_id] += 1);
        for c in counts {
            let frac = c as f64 / 8000.0;
            assert!((frac - 0.125).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let mut rng = SeededRng::new(4);
        let samples: Vec<Sample> = (0..100).map(|i| render(Concept::random(&mut rng), Modality::ALL[i % 4], &mut rng)).collect();
        let bytes = encode_dataset(&samples);
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);

        let empty = encode_dataset(&[]);
        assert!(decode_dataset(&empty).unwrap().is_empty());

        let cut = &bytes[..bytes.len() - 3];
        match decode_dataset(cut).unwrap_err() {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, bytes.len() - 3);
            }
            e => panic!("unexpected {e}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::Format { offset: 0, .. })));
    }
}
