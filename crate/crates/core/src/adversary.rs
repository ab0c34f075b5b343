//! Patch attacks used to try to falsify the detection guarantee.
//!
//! The guarantee holds for every patch content, so none of these searches
//! needs to be a strong attack; they only need to exercise the engine with a
//! wide variety of admissible edits and report any pair where both images are
//! verified yet the vanilla predictions differ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{Certifier, CertifiedOutput, MaskedClassifier, SoundnessVerdict};
use crate::error::{Error, Result};
use crate::mask::{AdversaryGeometry, PixelRect};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::Image;

/// A rectangle of attacker-chosen pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlacement<T: Scalar = f32> {
    pub rect: PixelRect,
    /// `[height, width, C]`; values are clamped to `[0, 1]` when applied.
    pub content: Tensor<T>,
}

impl<T: Scalar> PatchPlacement<T> {
    pub fn new(x: usize, y: usize, content: Tensor<T>) -> Result<Self> {
        let &[height, width, _] = content.shape() else {
            return Err(Error::Shape {
                op: "patch",
                detail: format!("content must be [H, W, C], got {:?}", content.shape()),
            });
        };
        Ok(Self {
            rect: PixelRect {
                x,
                y,
                width,
                height,
            },
            content,
        })
    }
}

/// Pastes the clamped patch over `image`; every other pixel is untouched.
pub fn apply_patch<T: Scalar>(image: &Image<T>, placement: &PatchPlacement<T>) -> Result<Image<T>> {
    let r = placement.rect;
    let c = image.channels();
    if r.width == 0
        || r.height == 0
        || r.x + r.width > image.width()
        || r.y + r.height > image.height()
    {
        return Err(Error::OutOfBounds(format!(
            "{r:?} on a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    if placement.content.shape() != [r.height, r.width, c] {
        return Err(Error::Shape {
            op: "apply_patch",
            detail: format!(
                "content {:?} for a {}x{}x{c} patch",
                placement.content.shape(),
                r.height,
                r.width
            ),
        });
    }
    let mut out = image.clone();
    let src = placement.content.data();
    for dy in 0..r.height {
        let dst = out.index(r.x, r.y + dy, 0);
        let row = &src[dy * r.width * c..(dy + 1) * r.width * c];
        for (o, &v) in out.data_mut()[dst..dst + r.width * c].iter_mut().zip(row) {
            *o = v.max(T::zero()).min(T::one());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Random,
    Greedy,
}

/// How a random trial fills its patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentPattern {
    Uniform,
    Constant,
    Checkerboard,
    /// Cropped from another image (or elsewhere in the clean image).
    Donor,
    /// Produced by greedy coordinate search.
    Searched,
}

/// One adversarial image and what the defended model made of it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub rect: PixelRect,
    pub pattern: ContentPattern,
    #[serde(flatten)]
    pub verdict: SoundnessVerdict,
}

/// Everything needed to replay a violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample<T: Scalar = f32> {
    pub trial: usize,
    pub rect: PixelRect,
    pub pattern: ContentPattern,
    /// Patch content, `[height, width, C]` row-major, already clamped.
    pub content: Vec<T>,
    pub verdict: SoundnessVerdict,
}

/// Aggregate result of one attack run on one clean image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport<T: Scalar = f32> {
    pub mode: AttackMode,
    pub seed: u64,
    pub clean_prediction: usize,
    pub clean_verified: bool,
    /// Adversarial images checked.
    pub trials: usize,
    /// Trials whose adversarial image failed verification.
    pub detected: usize,
    /// Trials that changed the vanilla prediction.
    pub flips: usize,
    /// Flips that were also caught by verification.
    pub flips_detected: usize,
    pub violations: usize,
    pub counterexamples: Vec<Counterexample<T>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<TrialOutcome>,
}

impl<T: Scalar> AttackReport<T> {
    fn new(mode: AttackMode, seed: u64, clean: &CertifiedOutput) -> Self {
        Self {
            mode,
            seed,
            clean_prediction: clean.prediction,
            clean_verified: clean.verified,
            trials: 0,
            detected: 0,
            flips: 0,
            flips_detected: 0,
            violations: 0,
            counterexamples: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    fn record(&mut self, trial: usize, placement: &PatchPlacement<T>, pattern: ContentPattern, v: SoundnessVerdict) {
        self.trials += 1;
        self.detected += !v.adversarial_verified as usize;
        self.flips += v.flipped() as usize;
        self.flips_detected += (v.flipped() && !v.adversarial_verified) as usize;
        if v.violation {
            self.violations += 1;
            self.counterexamples.push(Counterexample {
                trial,
                rect: placement.rect,
                pattern,
                content: placement
                    .content
                    .data()
                    .iter()
                    .map(|v| v.max(T::zero()).min(T::one()))
                    .collect(),
                verdict: v,
            });
        }
        self.outcomes.push(TrialOutcome {
            trial,
            rect: placement.rect,
            pattern,
            verdict: v,
        });
    }

    /// Drops the per-trial log, keeping counters and counterexamples.
    pub fn without_outcomes(mut self) -> Self {
        self.outcomes.clear();
        self
    }
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_fits<T: Scalar>(image: &Image<T>, adv: AdversaryGeometry) -> Result<()> {
    if adv.width > image.width() || adv.height > image.height() {
        return Err(Error::Uncertifiable(format!(
            "adversary {}x{} exceeds the {}x{} image",
            adv.width,
            adv.height,
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

fn random_rect(rng: &mut ChaCha8Rng, image_w: usize, image_h: usize, adv: AdversaryGeometry) -> PixelRect {
    PixelRect {
        x: rng.random_range(0..=image_w - adv.width),
        y: rng.random_range(0..=image_h - adv.height),
        width: adv.width,
        height: adv.height,
    }
}

fn random_content<T: Scalar>(
    rng: &mut ChaCha8Rng,
    rect: PixelRect,
    channels: usize,
    clean: &Image<T>,
    donors: &[Image<T>],
) -> (ContentPattern, Tensor<T>) {
    let shape = vec![rect.height, rect.width, channels];
    let pattern = match rng.random_range(0..4) {
        0 => ContentPattern::Uniform,
        1 => ContentPattern::Constant,
        2 => ContentPattern::Checkerboard,
        _ => ContentPattern::Donor,
    };
    let content = match pattern {
        ContentPattern::Uniform | ContentPattern::Searched => {
            Tensor::from_fn(shape, |_| T::lit(rng.random::<f64>()))
        }
        ContentPattern::Constant => {
            let color: Vec<T> = (0..channels).map(|_| T::lit(rng.random::<f64>())).collect();
            Tensor::from_fn(shape, |i| color[i % channels])
        }
        ContentPattern::Checkerboard => {
            let a: Vec<T> = (0..channels).map(|_| T::lit(rng.random::<f64>())).collect();
            let b: Vec<T> = (0..channels).map(|_| T::lit(rng.random::<f64>())).collect();
            let cell = rng.random_range(1..=3usize);
            Tensor::from_fn(shape, |i| {
                let px = i / channels;
                let (x, y) = (px % rect.width, px / rect.width);
                if (x / cell + y / cell) % 2 == 0 {
                    a[i % channels]
                } else {
                    b[i % channels]
                }
            })
        }
        ContentPattern::Donor => {
            let donor = if donors.is_empty() {
                clean
            } else {
                &donors[rng.random_range(0..donors.len())]
            };
            let sx = rng.random_range(0..=donor.width() - rect.width);
            let sy = rng.random_range(0..=donor.height() - rect.height);
            Tensor::from_fn(shape, |i| {
                let px = i / channels;
                donor.get(sx + px % rect.width, sy + px / rect.width, i % channels)
            })
        }
    };
    (pattern, content)
}

/// `trials` independent random patches on `clean`.
///
/// Trial `i` draws from a ChaCha8 stream `i` of `seed`, so reports are
/// reproducible and independent of thread scheduling. `donors` supplies
/// images to crop patch content from; it may be empty and must match the
/// clean image's channel count.
pub fn random_attack<T: Scalar, M: MaskedClassifier<T>>(
    certifier: &Certifier<'_, T, M>,
    clean: &Image<T>,
    adv: AdversaryGeometry,
    trials: usize,
    seed: u64,
    donors: &[Image<T>],
) -> Result<AttackReport<T>> {
    check_fits(clean, adv)?;
    if donors
        .iter()
        .any(|d| d.channels() != clean.channels() || d.width() < adv.width || d.height() < adv.height)
    {
        return Err(Error::shape("random_attack", "donor image cannot supply a patch"));
    }
    let clean_out = certifier.certify(clean)?;
    let results = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, trial as u64);
            let rect = random_rect(&mut rng, clean.width(), clean.height(), adv);
            let (pattern, content) = random_content(&mut rng, rect, clean.channels(), clean, donors);
            let placement = PatchPlacement { rect, content };
            let attacked = apply_patch(clean, &placement)?;
            let verdict = certifier.soundness_check_against(&clean_out, clean, &attacked, adv)?;
            Ok((placement, pattern, verdict))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = AttackReport::new(AttackMode::Random, seed, &clean_out);
    for (trial, (placement, pattern, verdict)) in results.into_iter().enumerate() {
        report.record(trial, &placement, pattern, verdict);
    }
    Ok(report)
}

/// Coordinate-wise hill climbing on one random patch.
///
/// Starts from uniform random content at a random placement and, for each of
/// `steps` rounds, tries a few values for one random pixel channel, keeping
/// the one that most increases the best wrong-class logit minus the clean
/// class logit of the unmasked pass. Every accepted state that flips the
/// vanilla prediction is run through the full soundness check, as is the
/// final state.
pub fn greedy_attack<T: Scalar, M: MaskedClassifier<T>>(
    certifier: &Certifier<'_, T, M>,
    clean: &Image<T>,
    adv: AdversaryGeometry,
    steps: usize,
    seed: u64,
) -> Result<AttackReport<T>> {
    check_fits(clean, adv)?;
    let clean_out = certifier.certify(clean)?;
    let target = clean_out.prediction;
    let model = certifier.model();
    let channels = clean.channels();
    let mut rng = trial_rng(seed, 0);
    let rect = random_rect(&mut rng, clean.width(), clean.height(), adv);
    let mut placement = PatchPlacement {
        rect,
        content: Tensor::from_fn(vec![rect.height, rect.width, channels], |_| {
            T::lit(rng.random::<f64>())
        }),
    };

    let objective = |p: &PatchPlacement<T>| -> Result<(f64, usize)> {
        let logits = model.logits(&apply_patch(clean, p)?, None)?;
        let own = logits.scores[target].to_f64_lossy();
        let rival = logits
            .scores
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != target)
            .map(|(_, v)| v.to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((rival - own, logits.predict()))
    };

    let mut report = AttackReport::new(AttackMode::Greedy, seed, &clean_out);
    let (mut best, _) = objective(&placement)?;
    let mut checked_final = false;
    for step in 0..steps {
        let slot = rng.random_range(0..placement.content.len());
        let current = placement.content.data()[slot];
        let candidates = [T::zero(), T::one(), T::lit(rng.random::<f64>())];
        let mut improved: Option<(T, f64, usize)> = None;
        for &value in &candidates {
            if value == current {
                continue;
            }
            placement.content.data_mut()[slot] = value;
            let (score, prediction) = objective(&placement)?;
            if score > improved.map_or(best, |(_, s, _)| s) {
                improved = Some((value, score, prediction));
            }
        }
        match improved {
            Some((value, score, prediction)) => {
                placement.content.data_mut()[slot] = value;
                best = score;
                checked_final = false;
                if prediction != target {
                    let attacked = apply_patch(clean, &placement)?;
                    let verdict =
                        certifier.soundness_check_against(&clean_out, clean, &attacked, adv)?;
                    report.record(step, &placement, ContentPattern::Searched, verdict);
                    checked_final = true;
                }
            }
            None => placement.content.data_mut()[slot] = current,
        }
    }
    if !checked_final {
        let attacked = apply_patch(clean, &placement)?;
        let verdict = certifier.soundness_check_against(&clean_out, clean, &attacked, adv)?;
        report.record(steps, &placement, ContentPattern::Searched, verdict);
    }
    Ok(report)
}
