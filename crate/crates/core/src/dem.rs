//! Description extraction and mask: turns per-sample attribute predictions
//! into masked description vectors.
//!
//! The pipeline for one sample is always `source -> mask_cloth -> noise`.
//! Noise is applied after masking, so it may set a masked cloth bit back to 1.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;

use crate::attribute_schema::{AttributeVector, AttributeVocabulary};
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng::Rng;

/// Number of items selected for a fractional `ratio` of `n`, rounded up.
///
/// The small epsilon keeps products such as `0.3 * 10` from rounding up to 4
/// through floating-point error.
pub fn ratio_count(ratio: f64, n: usize) -> usize {
    let raw = ratio * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_ratio(name: &str, ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("{name} {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Zero `ceil(mask_ratio * |cloth|)` cloth-related positions, chosen uniformly
/// without replacement. `mask_ratio == 1` zeroes all of them and draws nothing
/// from `rng`.
pub fn mask_cloth(
    vec: &AttributeVector,
    vocab: &AttributeVocabulary,
    mask_ratio: f64,
    rng: &mut Rng,
) -> Result<AttributeVector> {
    check_ratio("mask ratio", mask_ratio)?;
    vocab.check(vec)?;
    let cloth = vocab.cloth_indices();
    let mut out = vec.clone();
    let k = ratio_count(mask_ratio, cloth.len());
    if k == cloth.len() {
        for &i in &cloth {
            out.set(i, false);
        }
    } else if k > 0 {
        for j in sample(rng, cloth.len(), k).iter() {
            out.set(cloth[j], false);
        }
    }
    Ok(out)
}

/// How attribute-detector errors are simulated.
pub trait NoiseModel: Send + Sync {
    fn name(&self) -> &'static str;

    /// Corrupt `vec` at a `noise_ratio` fraction of positions.
    fn corrupt(&self, vec: &AttributeVector, noise_ratio: f64, rng: &mut Rng) -> AttributeVector;
}

/// Number of positions drawn for a noise ratio: `ratio * n` in expectation.
/// The fractional part is settled by a coin weighted by it, so `0.1 * 105 =
/// 10.5` draws 10 or 11 positions with equal probability.
pub fn expected_count(ratio: f64, n: usize, rng: &mut Rng) -> usize {
    let raw = ratio * n as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() < 1e-9 {
        return (nearest as usize).min(n);
    }
    let lo = raw.floor();
    let up = rng.gen::<f64>() < raw - lo;
    (lo as usize + up as usize).min(n)
}

fn replace_positions(vec: &AttributeVector, k: usize, rng: &mut Rng) -> AttributeVector {
    let mut out = vec.clone();
    if k > 0 {
        for i in sample(rng, vec.len(), k).iter() {
            out.set(i, rng.gen::<bool>());
        }
    }
    out
}

/// Draws `ratio * V` positions in expectation and replaces each with a fresh
/// uniform bit. Half of the drawn positions change on average, so the expected
/// number of changed bits is exactly `ratio * V / 2`.
pub struct ReplaceNoise;

impl NoiseModel for ReplaceNoise {
    fn name(&self) -> &'static str {
        "replace"
    }

    fn corrupt(&self, vec: &AttributeVector, noise_ratio: f64, rng: &mut Rng) -> AttributeVector {
        let k = expected_count(noise_ratio, vec.len(), rng);
        replace_positions(vec, k, rng)
    }
}

/// Like [`ReplaceNoise`] but always draws `ceil(ratio * V)` positions, which
/// biases the changed-bit count upward whenever `ratio * V` is fractional.
pub struct ReplaceCeilNoise;

impl NoiseModel for ReplaceCeilNoise {
    fn name(&self) -> &'static str {
        "replace-ceil"
    }

    fn corrupt(&self, vec: &AttributeVector, noise_ratio: f64, rng: &mut Rng) -> AttributeVector {
        replace_positions(vec, ratio_count(noise_ratio, vec.len()), rng)
    }
}

/// Draws `ceil(p * V)` positions and flips every one of them; the ratio then
/// counts bits changed.
pub struct FlipNoise;

impl NoiseModel for FlipNoise {
    fn name(&self) -> &'static str {
        "flip"
    }

    fn corrupt(&self, vec: &AttributeVector, noise_ratio: f64, rng: &mut Rng) -> AttributeVector {
        let mut out = vec.clone();
        let k = ratio_count(noise_ratio, vec.len());
        if k == 0 {
            return out;
        }
        for i in sample(rng, vec.len(), k).iter() {
            out.set(i, !vec.get(i));
        }
        out
    }
}

pub fn noise_models() -> Registry<dyn NoiseModel> {
    Registry::<dyn NoiseModel>::new("noise model")
        .register("replace", || Box::new(ReplaceNoise))
        .register("replace-ceil", || Box::new(ReplaceCeilNoise))
        .register("flip", || Box::new(FlipNoise))
}

/// Default noise: replace drawn positions with random bits.
pub fn inject_noise(vec: &AttributeVector, noise_ratio: f64, rng: &mut Rng) -> Result<AttributeVector> {
    check_ratio("noise ratio", noise_ratio)?;
    Ok(ReplaceNoise.corrupt(vec, noise_ratio, rng))
}

/// Provider of raw (unmasked) attribute vectors per sample.
pub trait AttributeSource: Send + Sync {
    fn attributes(&self, sample_id: &str) -> Result<AttributeVector>;
}

/// Attribute predictions kept in memory, keyed by sample id. Backs both the
/// `sample_id<TAB>bitstring` prediction file and synthetic ground truth.
#[derive(Debug, Clone, Default)]
pub struct TableSource {
    table: HashMap<String, AttributeVector>,
}

impl TableSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, vec: AttributeVector) {
        self.table.insert(sample_id.into(), vec);
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Load a prediction file, checking every vector against `vocab`.
    pub fn load(path: impl AsRef<Path>, vocab: &AttributeVocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut src = Self::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, bits) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, n + 1, "expected `sample_id<TAB>bitstring`"))?;
            let vec: AttributeVector = bits
                .trim()
                .parse()
                .map_err(|e: Error| Error::parse(path, n + 1, e.to_string()))?;
            vocab
                .check(&vec)
                .map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
            if src.table.contains_key(id) {
                return Err(Error::parse(path, n + 1, format!("duplicate sample `{id}`")));
            }
            src.insert(id, vec);
        }
        Ok(src)
    }

    /// Serialize in the prediction-file format, sorted by sample id.
    pub fn to_tsv(&self) -> String {
        let mut ids: Vec<&String> = self.table.keys().collect();
        ids.sort();
        ids.into_iter()
            .map(|id| format!("{id}\t{}\n", self.table[id]))
            .collect()
    }
}

impl AttributeSource for TableSource {
    fn attributes(&self, sample_id: &str) -> Result<AttributeVector> {
        self.table
            .get(sample_id)
            .cloned()
            .ok_or_else(|| Error::Lookup(sample_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDescription {
    pub sample_id: String,
    pub bits: AttributeVector,
    pub mask_ratio: f64,
    pub noise_ratio: f64,
}

impl MaskedDescription {
    /// The null description substituted when no description is available.
    pub fn null(len: usize) -> Self {
        Self {
            sample_id: String::new(),
            bits: AttributeVector::zeros(len),
            mask_ratio: 1.0,
            noise_ratio: 0.0,
        }
    }
}

/// Mask-then-noise description for one sample.
pub fn build_description(
    sample_id: &str,
    source: &dyn AttributeSource,
    vocab: &AttributeVocabulary,
    mask_ratio: f64,
    noise_ratio: f64,
    noise: &dyn NoiseModel,
    rng: &mut Rng,
) -> Result<MaskedDescription> {
    check_ratio("noise ratio", noise_ratio)?;
    let raw = source.attributes(sample_id)?;
    let masked = mask_cloth(&raw, vocab, mask_ratio, rng)?;
    let bits = noise.corrupt(&masked, noise_ratio, rng);
    Ok(MaskedDescription {
        sample_id: sample_id.to_string(),
        bits,
        mask_ratio,
        noise_ratio,
    })
}

/// Which description, if any, accompanies an image during training.
pub trait DescriptionPolicy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Whether the model carries description tokens at all.
    fn uses_description(&self) -> bool {
        true
    }

    /// The mask ratio actually applied, given the configured one.
    fn effective_mask_ratio(&self, configured: f64) -> f64 {
        configured
    }
}

/// Cloth-related attributes masked at the configured ratio.
pub struct Masked;

/// Raw attributes with no cloth masking; noise still applies.
pub struct Unmasked;

/// No description tokens; the fusion stages see only `[DES]` and patches.
pub struct ImageOnly;

impl DescriptionPolicy for Masked {
    fn name(&self) -> &'static str {
        "masked"
    }
}

impl DescriptionPolicy for Unmasked {
    fn name(&self) -> &'static str {
        "unmasked"
    }

    fn effective_mask_ratio(&self, _configured: f64) -> f64 {
        0.0
    }
}

impl DescriptionPolicy for ImageOnly {
    fn name(&self) -> &'static str {
        "image-only"
    }

    fn uses_description(&self) -> bool {
        false
    }
}

pub fn description_policies() -> Registry<dyn DescriptionPolicy> {
    Registry::<dyn DescriptionPolicy>::new("description policy")
        .register("masked", || Box::new(Masked))
        .register("unmasked", || Box::new(Unmasked))
        .register("image-only", || Box::new(ImageOnly))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::SeedableRng;

    fn random_vec(len: usize, rng: &mut Rng) -> AttributeVector {
        AttributeVector::from_bits((0..len).map(|_| rng.gen()).collect())
    }

    #[test]
    fn ratio_count_rounds_up() {
        assert_eq!(ratio_count(0.1, 105), 11);
        assert_eq!(ratio_count(0.3, 10), 3);
        assert_eq!(ratio_count(0.6, 48), 29);
        assert_eq!(ratio_count(0.0, 48), 0);
        assert_eq!(ratio_count(1.0, 48), 48);
    }

    #[test]
    fn full_mask_zeroes_cloth_bits_only() {
        let vocab = AttributeVocabulary::bundled();
        let cloth = vocab.cloth_indices();
        let mut v = AttributeVector::from_bits(vec![true; vocab.len()]);
        v.set(cloth[2], false);
        let mut rng = Rng::seed_from_u64(0);
        let out = mask_cloth(&v, &vocab, 1.0, &mut rng).unwrap();
        for i in 0..vocab.len() {
            if vocab.is_cloth_related(i) {
                assert!(!out.get(i));
            } else {
                assert_eq!(out.get(i), v.get(i));
            }
        }
        // no draws consumed
        let mut fresh = Rng::seed_from_u64(0);
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());
    }

    #[test]
    fn zero_mask_is_identity() {
        let vocab = AttributeVocabulary::bundled();
        let mut rng = stream(1, "t", &[]);
        let v = random_vec(vocab.len(), &mut rng);
        assert_eq!(mask_cloth(&v, &vocab, 0.0, &mut rng).unwrap(), v);
    }

    #[test]
    fn partial_mask_touches_exact_count_of_cloth_positions() {
        let vocab = AttributeVocabulary::bundled();
        let cloth = vocab.cloth_indices();
        let expected = ratio_count(0.6, cloth.len());
        for seed in 0..3 {
            let all_ones = AttributeVector::from_bits(vec![true; vocab.len()]);
            let mut rng = stream(seed, "mask", &[]);
            let out = mask_cloth(&all_ones, &vocab, 0.6, &mut rng).unwrap();
            let changed = all_ones.diff(&out);
            assert_eq!(changed.len(), expected);
            assert!(changed.iter().all(|i| cloth.contains(i)));
        }
    }

    #[test]
    fn ratio_bounds_are_checked() {
        let vocab = AttributeVocabulary::bundled();
        let v = AttributeVector::zeros(vocab.len());
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(mask_cloth(&v, &vocab, 1.5, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(mask_cloth(&v, &vocab, -0.1, &mut rng), Err(Error::Argument(_))));
        assert!(matches!(inject_noise(&v, 2.0, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut rng = Rng::seed_from_u64(5);
        let v = random_vec(105, &mut rng);
        assert_eq!(inject_noise(&v, 0.0, &mut rng).unwrap(), v);
    }

    #[test]
    fn noise_draws_exact_position_count() {
        // With flip noise every drawn position changes, exposing the draw count.
        let v = AttributeVector::zeros(105);
        for seed in 0..20 {
            let mut rng = Rng::seed_from_u64(seed);
            let out = FlipNoise.corrupt(&v, 0.1, &mut rng);
            assert_eq!(out.count_ones(), 11);
        }
        // Replace noise touches no more than the drawn positions.
        for seed in 0..20 {
            let mut rng = Rng::seed_from_u64(seed);
            assert!(ReplaceNoise.corrupt(&v, 0.1, &mut rng).count_ones() <= 11);
            assert!(ReplaceCeilNoise.corrupt(&v, 0.1, &mut rng).count_ones() <= 11);
        }
    }

    #[test]
    fn expected_count_is_unbiased() {
        let mut rng = Rng::seed_from_u64(3);
        assert_eq!(expected_count(0.2, 105, &mut rng), 21);
        assert_eq!(expected_count(0.0, 105, &mut rng), 0);
        assert_eq!(expected_count(1.0, 105, &mut rng), 105);
        let draws: Vec<usize> = (0..4000).map(|_| expected_count(0.1, 105, &mut rng)).collect();
        assert!(draws.iter().all(|&k| k == 10 || k == 11));
        let mean = draws.iter().sum::<usize>() as f64 / draws.len() as f64;
        assert!((mean - 10.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn full_noise_sets_half_the_bits() {
        // binomial oracle: 10_000 trials x 105 bits, p = 0.5
        let v = AttributeVector::zeros(105);
        let mut rng = Rng::seed_from_u64(11);
        let trials = 10_000;
        let total: usize = (0..trials)
            .map(|_| inject_noise(&v, 1.0, &mut rng).unwrap().count_ones())
            .sum();
        let n = (trials * 105) as f64;
        let mean = total as f64 / n;
        let se = (0.25 / n).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean {mean}");
    }

    fn source(vocab: &AttributeVocabulary) -> TableSource {
        let mut src = TableSource::new();
        let mut rng = Rng::seed_from_u64(2);
        src.insert("a", random_vec(vocab.len(), &mut rng));
        src
    }

    #[test]
    fn description_composition_and_determinism() {
        let vocab = AttributeVocabulary::bundled();
        let src = source(&vocab);
        let raw = src.attributes("a").unwrap();
        let d = build_description("a", &src, &vocab, 1.0, 0.0, &ReplaceNoise, &mut stream(1, "n", &[]))
            .unwrap();
        for i in 0..vocab.len() {
            let expected = if vocab.is_cloth_related(i) { false } else { raw.get(i) };
            assert_eq!(d.bits.get(i), expected);
        }
        let a = build_description("a", &src, &vocab, 1.0, 0.1, &ReplaceNoise, &mut stream(9, "n", &[]))
            .unwrap();
        let b = build_description("a", &src, &vocab, 1.0, 0.1, &ReplaceNoise, &mut stream(9, "n", &[]))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!((a.mask_ratio, a.noise_ratio), (1.0, 0.1));
        assert!(matches!(
            build_description("zz", &src, &vocab, 1.0, 0.0, &ReplaceNoise, &mut stream(1, "n", &[])),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn prediction_file_roundtrip_and_errors() {
        let vocab = AttributeVocabulary::bundled();
        let src = source(&vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attrs.tsv");
        std::fs::write(&path, src.to_tsv()).unwrap();
        let back = TableSource::load(&path, &vocab).unwrap();
        assert_eq!(back.attributes("a").unwrap(), src.attributes("a").unwrap());

        std::fs::write(&path, "a\t0101\n").unwrap();
        let err = TableSource::load(&path, &vocab).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn policies_resolve_by_name() {
        let reg = description_policies();
        assert_eq!(reg.create("unmasked").unwrap().effective_mask_ratio(1.0), 0.0);
        assert_eq!(reg.create("masked").unwrap().effective_mask_ratio(0.3), 0.3);
        assert!(!reg.create("image-only").unwrap().uses_description());
        assert!(reg.create("bogus").is_err());
        assert_eq!(noise_models().names(), vec!["replace", "replace-ceil", "flip"]);
    }
}
