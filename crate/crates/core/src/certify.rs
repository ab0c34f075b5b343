//! The defended model: a vanilla prediction plus a consensus check over every
//! masked prediction of a covering plan, and the dataset-level metrics.

use std::marker::PhantomData;
use std::ops::Add;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::mask::{AdversaryGeometry, MaskPlan, PixelRect};
use crate::scalar::Scalar;
use crate::vit::{AttentionBias, Image, Logits, ModelConfig, VisionTransformer};

/// Default number of masked passes evaluated per parallel batch.
pub const DEFAULT_BATCH_CAP: usize = 64;

/// Anything that can classify an image under an optional attention bias.
pub trait MaskedClassifier<T: Scalar>: Sync {
    fn config(&self) -> &ModelConfig;
    fn logits(&self, image: &Image<T>, bias: Option<&AttentionBias>) -> Result<Logits<T>>;

    /// One pass per bias on the same image. Implementations may share work
    /// across passes but must return what [`Self::logits`] would.
    fn logits_many(
        &self,
        image: &Image<T>,
        biases: &[Option<&AttentionBias>],
    ) -> Result<Vec<Logits<T>>> {
        biases.iter().map(|b| self.logits(image, *b)).collect()
    }
}

impl<T: Scalar> MaskedClassifier<T> for VisionTransformer<T> {
    fn config(&self) -> &ModelConfig {
        VisionTransformer::config(self)
    }

    fn logits(&self, image: &Image<T>, bias: Option<&AttentionBias>) -> Result<Logits<T>> {
        self.forward(image, bias)
    }

    fn logits_many(
        &self,
        image: &Image<T>,
        biases: &[Option<&AttentionBias>],
    ) -> Result<Vec<Logits<T>>> {
        self.forward_many(image, biases)
    }
}

/// Prediction and verification result for one image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifiedOutput {
    /// Class from the unmasked pass.
    pub prediction: usize,
    /// True iff every masked pass agrees with `prediction`.
    pub verified: bool,
    pub k: usize,
    /// Masked-pass classes in plan order.
    pub votes: Vec<usize>,
    /// Plan indices of masks whose vote differs from `prediction`.
    pub dissent_masks: Vec<usize>,
    /// Top-1 minus top-2 logit of the unmasked pass. Diagnostic only.
    pub margin: f64,
}

impl CertifiedOutput {
    fn from_votes(clean: &Logits<impl Scalar>, votes: Vec<usize>) -> Self {
        let prediction = clean.predict();
        let dissent_masks: Vec<usize> = votes
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != prediction)
            .map(|(i, _)| i)
            .collect();
        Self {
            prediction,
            verified: dissent_masks.is_empty(),
            k: votes.len(),
            votes,
            dissent_masks,
            margin: clean.margin(),
        }
    }
}

/// Integer tallies behind the four accuracy metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub total: u64,
    pub correct: u64,
    pub verified: u64,
    pub verified_and_correct: u64,
}

impl EvalCounts {
    pub fn record(&mut self, correct: bool, verified: bool) {
        self.total += 1;
        self.correct += correct as u64;
        self.verified += verified as u64;
        self.verified_and_correct += (correct && verified) as u64;
    }

    pub fn from_outcomes(outcomes: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut counts = Self::default();
        for (correct, verified) in outcomes {
            counts.record(correct, verified);
        }
        counts
    }
}

impl Add for EvalCounts {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            total: self.total + rhs.total,
            correct: self.correct + rhs.correct,
            verified: self.verified + rhs.verified,
            verified_and_correct: self.verified_and_correct + rhs.verified_and_correct,
        }
    }
}

/// Clean accuracy, certified accuracy, trust ratio and in-trust accuracy of a
/// non-empty dataset, as exact ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalMetrics {
    counts: EvalCounts,
}

impl EvalMetrics {
    pub fn new(counts: EvalCounts) -> Result<Self> {
        if counts.total == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> EvalCounts {
        self.counts
    }

    pub fn acc_clean(&self) -> Ratio<u64> {
        Ratio::new(self.counts.correct, self.counts.total)
    }

    pub fn acc_certified(&self) -> Ratio<u64> {
        Ratio::new(self.counts.verified_and_correct, self.counts.total)
    }

    pub fn r_trust(&self) -> Ratio<u64> {
        Ratio::new(self.counts.verified, self.counts.total)
    }

    /// `None` when nothing was verified.
    pub fn acc_in_trust(&self) -> Option<Ratio<u64>> {
        (self.counts.verified > 0)
            .then(|| Ratio::new(self.counts.verified_and_correct, self.counts.verified))
    }
}

fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

impl Serialize for EvalMetrics {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("EvalMetrics", 8)?;
        s.serialize_field("acc_clean", &to_f64(self.acc_clean()))?;
        s.serialize_field("acc_certified", &to_f64(self.acc_certified()))?;
        s.serialize_field("r_trust", &to_f64(self.r_trust()))?;
        s.serialize_field("acc_in_trust", &self.acc_in_trust().map(to_f64))?;
        s.serialize_field("total", &self.counts.total)?;
        s.serialize_field("correct", &self.counts.correct)?;
        s.serialize_field("verified", &self.counts.verified)?;
        s.serialize_field("verified_and_correct", &self.counts.verified_and_correct)?;
        s.end()
    }
}

/// Per-image results of a dataset run plus the aggregate metrics.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub samples: Vec<CertifiedOutput>,
}

/// Outcome of checking one (clean, adversarial) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundnessVerdict {
    pub clean_prediction: usize,
    pub clean_verified: bool,
    pub adversarial_prediction: usize,
    pub adversarial_verified: bool,
    /// Both verified yet the predictions differ. Must never happen.
    pub violation: bool,
}

impl SoundnessVerdict {
    pub fn from_outputs(clean: &CertifiedOutput, adversarial: &CertifiedOutput) -> Self {
        Self {
            clean_prediction: clean.prediction,
            clean_verified: clean.verified,
            adversarial_prediction: adversarial.prediction,
            adversarial_verified: adversarial.verified,
            violation: clean.verified
                && adversarial.verified
                && clean.prediction != adversarial.prediction,
        }
    }

    /// The attack changed the vanilla prediction.
    pub fn flipped(&self) -> bool {
        self.clean_prediction != self.adversarial_prediction
    }
}

/// Smallest rectangle containing every pixel where the two images differ,
/// or `None` when they are identical.
pub fn difference_region<T: Scalar>(a: &Image<T>, b: &Image<T>) -> Result<Option<PixelRect>> {
    if a.pixels().shape() != b.pixels().shape() {
        return Err(Error::shape(
            "difference_region",
            format!("{:?} vs {:?}", a.pixels().shape(), b.pixels().shape()),
        ));
    }
    let c = a.channels();
    let w = a.width();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits() {
            continue;
        }
        let (px, py) = ((i / c) % w, i / c / w);
        bounds = Some(match bounds {
            None => (px, py, px, py),
            Some((x0, y0, x1, y1)) => (x0.min(px), y0.min(py), x1.max(px), y1.max(py)),
        });
    }
    Ok(bounds.map(|(x0, y0, x1, y1)| PixelRect {
        x: x0,
        y: y0,
        width: x1 - x0 + 1,
        height: y1 - y0 + 1,
    }))
}

/// Runs a model under a [`MaskPlan`] and applies the consensus rule.
pub struct Certifier<'m, T: Scalar, M: MaskedClassifier<T>> {
    model: &'m M,
    plan: MaskPlan,
    biases: Vec<AttentionBias>,
    batch_cap: usize,
    _scalar: PhantomData<T>,
}

impl<'m, T: Scalar, M: MaskedClassifier<T>> Certifier<'m, T, M> {
    pub fn new(model: &'m M, plan: MaskPlan) -> Result<Self> {
        if plan.grid() != model.config().grid() {
            return Err(Error::shape(
                "certifier",
                format!(
                    "plan grid {:?} vs model grid {:?}",
                    plan.grid(),
                    model.config().grid()
                ),
            ));
        }
        let biases = plan.biases()?;
        Ok(Self {
            model,
            plan,
            biases,
            batch_cap: DEFAULT_BATCH_CAP,
            _scalar: PhantomData,
        })
    }

    /// Caps how many masked passes run concurrently. Results do not depend
    /// on the cap.
    pub fn with_batch_cap(mut self, cap: usize) -> Self {
        self.batch_cap = cap.max(1);
        self
    }

    pub fn plan(&self) -> &MaskPlan {
        &self.plan
    }

    pub fn model(&self) -> &M {
        self.model
    }

    /// One unmasked pass and `k` masked passes.
    pub fn certify(&self, image: &Image<T>) -> Result<CertifiedOutput> {
        image.check_matches(self.model.config())?;
        let clean = self.model.logits(image, None)?;
        let mut votes = Vec::with_capacity(self.biases.len());
        for chunk in self.biases.chunks(self.batch_cap) {
            let split = chunk.len().div_ceil(rayon::current_num_threads()).max(1);
            let batch = chunk
                .par_chunks(split)
                .map(|part| {
                    let biases: Vec<_> = part.iter().map(Some).collect();
                    self.model.logits_many(image, &biases)
                })
                .collect::<Result<Vec<_>>>()?;
            votes.extend(batch.into_iter().flatten().map(|l| l.predict()));
        }
        Ok(CertifiedOutput::from_votes(&clean, votes))
    }

    /// Certifies every labelled image and tallies the metrics.
    pub fn evaluate(&self, dataset: &[(Image<T>, usize)]) -> Result<Evaluation> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let classes = self.model.config().num_classes;
        if let Some((_, label)) = dataset.iter().find(|(_, l)| *l >= classes) {
            return Err(Error::Label {
                label: *label,
                classes,
            });
        }
        let samples = dataset
            .par_iter()
            .map(|(image, _)| self.certify(image))
            .collect::<Result<Vec<_>>>()?;
        let counts = EvalCounts::from_outcomes(
            samples
                .iter()
                .zip(dataset)
                .map(|(out, (_, label))| (out.prediction == *label, out.verified)),
        );
        Ok(Evaluation {
            metrics: EvalMetrics::new(counts)?,
            samples,
        })
    }

    /// Checks that `adversarial` is a single-patch edit of `clean` within
    /// `adv`, then reports whether the pair breaks the detection guarantee.
    pub fn soundness_check(
        &self,
        clean: &Image<T>,
        adversarial: &Image<T>,
        adv: AdversaryGeometry,
    ) -> Result<SoundnessVerdict> {
        let clean_out = self.certify(clean)?;
        self.soundness_check_against(&clean_out, clean, adversarial, adv)
    }

    /// Like [`Self::soundness_check`] with the clean image already certified.
    pub fn soundness_check_against(
        &self,
        clean_out: &CertifiedOutput,
        clean: &Image<T>,
        adversarial: &Image<T>,
        adv: AdversaryGeometry,
    ) -> Result<SoundnessVerdict> {
        if let Some(region) = difference_region(clean, adversarial)? {
            if region.width > adv.width || region.height > adv.height {
                return Err(Error::NotAdmissible(format!(
                    "changes span {}x{} at ({}, {}), bound is {}x{}",
                    region.width, region.height, region.x, region.y, adv.width, adv.height
                )));
            }
        }
        let adv_out = self.certify(adversarial)?;
        Ok(SoundnessVerdict::from_outputs(clean_out, &adv_out))
    }
}
