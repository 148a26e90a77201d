//! Deterministic two-view compositional world.
//!
//! A latent `z` assigns one of `values_per_factor` values to each of `C`
//! factors. View A is a shuffled sequence of continuous vectors (one per
//! factor value, nuisance value or filler, plus Gaussian noise); view B is a
//! shuffled token sequence over the shared factors and its own nuisance
//! tokens, terminated by EOS. Nuisance content is drawn from streams that
//! are independent across views.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::backbone::InputBatch;
use crate::tensor::{Rng, Scalar, Stream, Tensor};

pub const EOS_TOKEN: usize = 1;
pub const FILLER_TOKEN: usize = 2;
const FIRST_CONTENT_TOKEN: usize = 3;

const VIEW_A_STREAM: u64 = 0x100;
const VIEW_B_STREAM: u64 = 0x200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_factors: usize,
    pub values_per_factor: usize,
    /// Factors visible in both views; the rest appear in view A only.
    pub shared_factors: Vec<usize>,
    pub nuisance_per_view: usize,
    /// Inclusive content length range, before CLS/EOS.
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub embed_dim: usize,
    pub vocab: usize,
    pub noise: f64,
    /// Seeds the view-A embedding table.
    pub world_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_factors: 4,
            values_per_factor: 8,
            shared_factors: vec![0, 1, 2, 3],
            nuisance_per_view: 2,
            seq_len_min: 6,
            seq_len_max: 12,
            embed_dim: 16,
            vocab: 256,
            noise: 0.05,
            world_seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self, prefix: &str, errs: &mut Vec<String>) {
        if self.num_factors == 0 {
            errs.push(format!("{prefix}num_factors must be >= 1"));
        }
        if self.values_per_factor == 0 {
            errs.push(format!("{prefix}values_per_factor must be >= 1"));
        }
        if self.shared_factors.is_empty() {
            errs.push(format!("{prefix}shared_factors must be nonempty"));
        }
        let mut seen = vec![false; self.num_factors];
        for &f in &self.shared_factors {
            if f >= self.num_factors {
                errs.push(format!("{prefix}shared factor {f} out of range for {} factors", self.num_factors));
            } else if std::mem::replace(&mut seen[f], true) {
                errs.push(format!("{prefix}shared factor {f} listed twice"));
            }
        }
        if self.seq_len_min > self.seq_len_max {
            errs.push(format!(
                "{prefix}seq_len_min {} exceeds seq_len_max {}",
                self.seq_len_min, self.seq_len_max
            ));
        }
        let content = self.num_factors + self.nuisance_per_view;
        if self.seq_len_min < content {
            errs.push(format!(
                "{prefix}seq_len_min {} cannot hold {content} factor and nuisance items",
                self.seq_len_min
            ));
        }
        if self.embed_dim == 0 {
            errs.push(format!("{prefix}embed_dim must be >= 1"));
        }
        let needed = self.token_count();
        if self.vocab < needed {
            errs.push(format!("{prefix}vocab {} is smaller than the {needed} tokens used", self.vocab));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            errs.push(format!("{prefix}noise must be finite and >= 0"));
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errs = Vec::new();
        self.validate("", &mut errs);
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Tokens used by view B, including PAD, EOS and filler.
    pub fn token_count(&self) -> usize {
        FIRST_CONTENT_TOKEN + (self.num_factors + self.nuisance_per_view) * self.values_per_factor
    }

    pub fn factor_token(&self, factor: usize, value: usize) -> usize {
        FIRST_CONTENT_TOKEN + factor * self.values_per_factor + value
    }

    pub fn nuisance_token(&self, k: usize, value: usize) -> usize {
        FIRST_CONTENT_TOKEN + (self.num_factors + k) * self.values_per_factor + value
    }

    /// Longest view-A sequence once a CLS token is prepended, and longest
    /// view-B sequence including EOS.
    pub fn max_positions(&self) -> usize {
        self.seq_len_max + 1
    }

    pub fn num_classes(&self) -> usize {
        self.values_per_factor
    }
}

/// One paired sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub seed: u64,
    /// `[n_a, embed_dim]`
    pub view_a: Tensor<f64>,
    /// Item id behind each view-A row (content token id or filler).
    pub view_a_ids: Vec<usize>,
    /// Token ids ending in EOS.
    pub view_b: Vec<usize>,
    pub eos_index: usize,
    pub z: Vec<usize>,
    /// Value of factor 0.
    pub class_label: usize,
    pub nuisance_a: Vec<usize>,
    pub nuisance_b: Vec<usize>,
}

/// A `WorldSpec` together with its view-A embedding table.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    /// Row per token id `< token_count`; rows for PAD and EOS are unused.
    table: Vec<f64>,
}

impl World {
    pub fn new(spec: &WorldSpec) -> Result<Self> {
        spec.check()?;
        let mut rng = Rng::new(spec.world_seed, Stream::World);
        let scale = 1.0 / (spec.embed_dim as f64).sqrt();
        let table = (0..spec.token_count() * spec.embed_dim)
            .map(|_| rng.normal() * scale)
            .collect();
        Ok(World { spec: spec.clone(), table })
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        let e = self.spec.embed_dim;
        &self.table[id * e..(id + 1) * e]
    }

    pub fn sample_z(&self, rng: &mut Rng) -> Vec<usize> {
        (0..self.spec.num_factors)
            .map(|_| rng.below(self.spec.values_per_factor))
            .collect()
    }

    /// Latent and both views from one seed.
    pub fn sample(&self, seed: u64) -> SamplePair {
        let z = self.sample_z(&mut Rng::new(seed, Stream::Data));
        self.render(&z, seed)
    }

    /// Both views of a given latent; `seed` fixes nuisance, lengths, order
    /// and noise.
    pub fn render(&self, z: &[usize], seed: u64) -> SamplePair {
        let s = &self.spec;
        let mut ra = Rng::with_stream(seed, VIEW_A_STREAM);
        let mut rb = Rng::with_stream(seed, VIEW_B_STREAM);
        let (view_a, view_a_ids, nuisance_a) = self.render_a(z, &mut ra);

        let nuisance_b: Vec<usize> = (0..s.nuisance_per_view).map(|_| rb.below(s.values_per_factor)).collect();
        let len_b = s.seq_len_min + rb.below(s.seq_len_max - s.seq_len_min + 1);
        let mut view_b: Vec<usize> = s.shared_factors.iter().map(|&f| s.factor_token(f, z[f])).collect();
        view_b.extend(nuisance_b.iter().enumerate().map(|(k, &v)| s.nuisance_token(k, v)));
        view_b.resize(len_b.max(view_b.len()), FILLER_TOKEN);
        rb.shuffle(&mut view_b);
        let eos_index = view_b.len();
        view_b.push(EOS_TOKEN);

        SamplePair {
            seed,
            view_a,
            view_a_ids,
            view_b,
            eos_index,
            z: z.to_vec(),
            class_label: z[0],
            nuisance_a,
            nuisance_b,
        }
    }

    /// A fresh view A of `z`: new nuisance values, length, order and noise.
    pub fn resample_view_a(&self, z: &[usize], rng: &mut Rng) -> Tensor<f64> {
        self.render_a(z, rng).0
    }

    fn render_a(&self, z: &[usize], rng: &mut Rng) -> (Tensor<f64>, Vec<usize>, Vec<usize>) {
        let s = &self.spec;
        let nuisance: Vec<usize> = (0..s.nuisance_per_view).map(|_| rng.below(s.values_per_factor)).collect();
        let len = s.seq_len_min + rng.below(s.seq_len_max - s.seq_len_min + 1);
        let mut ids: Vec<usize> = (0..s.num_factors).map(|f| s.factor_token(f, z[f])).collect();
        ids.extend(nuisance.iter().enumerate().map(|(k, &v)| s.nuisance_token(k, v)));
        ids.resize(len.max(ids.len()), FILLER_TOKEN);
        rng.shuffle(&mut ids);
        let mut data = Vec::with_capacity(ids.len() * s.embed_dim);
        for &id in &ids {
            data.extend(self.embedding(id).iter().map(|&x| x + s.noise * rng.normal()));
        }
        let t = Tensor::new(vec![ids.len(), s.embed_dim], data).expect("view A shape");
        (t, ids, nuisance)
    }

    /// Nearest table entry for every view-A row.
    pub fn decode_a_ids(&self, view_a: &Tensor<f64>) -> Vec<usize> {
        let e = self.spec.embed_dim;
        view_a
            .data()
            .chunks(e)
            .map(|row| {
                (FILLER_TOKEN..self.spec.token_count())
                    .map(|id| {
                        let d: f64 = row.iter().zip(self.embedding(id)).map(|(a, b)| (a - b) * (a - b)).sum();
                        (id, d)
                    })
                    .fold((FILLER_TOKEN, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
                    .0
            })
            .collect()
    }

    /// Reads factor values from content token ids; `None` for factors absent
    /// from the sequence.
    pub fn decode_factors(&self, ids: &[usize]) -> Vec<Option<usize>> {
        let s = &self.spec;
        let mut z = vec![None; s.num_factors];
        for &id in ids {
            if id >= FIRST_CONTENT_TOKEN && id < s.factor_token(s.num_factors, 0) {
                let k = id - FIRST_CONTENT_TOKEN;
                z[k / s.values_per_factor] = Some(k % s.values_per_factor);
            }
        }
        z
    }
}

/// Convenience form of [`World::sample`].
pub fn sample_pair(spec: &WorldSpec, seed: u64) -> Result<SamplePair> {
    Ok(World::new(spec)?.sample(seed))
}

// ── Datasets ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.class_label).collect()
    }

    pub fn image_batch<T: Scalar>(&self, idx: &[usize]) -> InputBatch<T> {
        InputBatch::Continuous {
            seqs: idx.iter().map(|&i| self.pairs[i].view_a.cast()).collect(),
        }
    }

    pub fn text_batch<T: Scalar>(&self, idx: &[usize]) -> InputBatch<T> {
        InputBatch::Tokens {
            ids: idx.iter().map(|&i| self.pairs[i].view_b.clone()).collect(),
            eos: idx.iter().map(|&i| self.pairs[i].eos_index).collect(),
        }
    }

    /// One JSON object per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for p in &self.pairs {
            let rows: Vec<&[f64]> = (0..p.view_a.shape()[0]).map(|i| p.view_a.row(i)).collect();
            let line = json!({
                "seed": p.seed,
                "view_a": rows,
                "view_b": p.view_b,
                "eos_index": p.eos_index,
                "z": p.z,
                "class_label": p.class_label,
            });
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Usage(format!("unknown split {name:?} (expected train, val or test)"))),
        }
    }
}

const SPLIT_RANGE_BITS: u32 = 28;

/// First sample seed of a split; each split owns `2^28` consecutive seeds.
pub fn split_seed_base(seed: u64, split: u64) -> u64 {
    (seed << 32) | (split << SPLIT_RANGE_BITS)
}

/// Latents held out of train/val by the compositional split.
pub fn is_held_out(z: &[usize], values_per_factor: usize) -> bool {
    z.iter().sum::<usize>() % values_per_factor == 0
}

/// Train, validation and test sets over disjoint seed ranges. With
/// `compositional`, test latents are exactly the held-out combinations and
/// train/val never contain them.
pub fn make_splits(
    spec: &WorldSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    compositional: bool,
) -> Result<Splits> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::config("split sizes must all be >= 1"));
    }
    if seed >= 1 << 32 {
        return Err(Error::config("split seed must be < 2^32"));
    }
    let world = World::new(spec)?;
    if compositional && (spec.num_factors < 2 || spec.values_per_factor < 2) {
        return Err(Error::config(
            "compositional split needs at least 2 factors with at least 2 values each",
        ));
    }
    let build = |split: u64, n: usize, keep: &dyn Fn(&[usize]) -> bool| -> Result<Dataset> {
        let base = split_seed_base(seed, split);
        let mut pairs = Vec::with_capacity(n);
        let mut i = 0u64;
        while pairs.len() < n {
            if i >= 1 << SPLIT_RANGE_BITS {
                return Err(Error::config("split seed range exhausted"));
            }
            let s = base + i;
            i += 1;
            let z = world.sample_z(&mut Rng::new(s, Stream::Data));
            if keep(&z) {
                pairs.push(world.render(&z, s));
            }
        }
        Ok(Dataset { pairs })
    };
    let v = spec.values_per_factor;
    let seen = |z: &[usize]| !compositional || !is_held_out(z, v);
    let novel = |z: &[usize]| !compositional || is_held_out(z, v);
    Ok(Splits {
        train: build(0, n_train, &seen)?,
        val: build(1, n_val, &seen)?,
        test: build(2, n_test, &novel)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_nuisance_gives_exactly_factor_tokens() {
        let spec = WorldSpec {
            nuisance_per_view: 0,
            seq_len_min: 4,
            seq_len_max: 4,
            ..WorldSpec::default()
        };
        let p = sample_pair(&spec, 11).unwrap();
        let mut b: Vec<usize> = p.view_b[..p.eos_index].to_vec();
        b.sort();
        let mut want: Vec<usize> = (0..4).map(|f| spec.factor_token(f, p.z[f])).collect();
        want.sort();
        assert_eq!(b, want);
        let mut a = p.view_a_ids.clone();
        a.sort();
        assert_eq!(a, want);
    }

    #[test]
    fn deterministic_in_seed() {
        let spec = WorldSpec::default();
        assert_eq!(sample_pair(&spec, 5).unwrap(), sample_pair(&spec, 5).unwrap());
        assert_ne!(sample_pair(&spec, 5).unwrap(), sample_pair(&spec, 6).unwrap());
    }

    #[test]
    fn equal_latent_different_seed_changes_only_nuisance_and_order() {
        let world = World::new(&WorldSpec::default()).unwrap();
        let z = vec![1, 2, 3, 4];
        let a = world.render(&z, 1);
        let b = world.render(&z, 2);
        assert_eq!(world.decode_factors(&a.view_b), world.decode_factors(&b.view_b));
        assert_eq!(world.decode_factors(&a.view_a_ids), world.decode_factors(&b.view_a_ids));
        assert_ne!(a.view_b, b.view_b);
    }

    #[test]
    fn both_views_decode_to_latent() {
        let spec = WorldSpec::default();
        let world = World::new(&spec).unwrap();
        for seed in 0..200 {
            let p = world.sample(seed);
            let want: Vec<Option<usize>> = p.z.iter().map(|&v| Some(v)).collect();
            let ids = world.decode_a_ids(&p.view_a);
            assert_eq!(ids, p.view_a_ids);
            assert_eq!(world.decode_factors(&ids), want);
            assert_eq!(world.decode_factors(&p.view_b), want);
            assert_eq!(p.view_b[p.eos_index], EOS_TOKEN);
            assert!(p.view_a.shape()[0] <= spec.seq_len_max);
            assert!(p.view_b.len() <= spec.max_positions());
        }
    }

    #[test]
    fn unshared_factors_only_in_view_a() {
        let spec = WorldSpec {
            shared_factors: vec![1, 3],
            ..WorldSpec::default()
        };
        let world = World::new(&spec).unwrap();
        let p = world.sample(3);
        let b = world.decode_factors(&p.view_b);
        assert_eq!(b[0], None);
        assert_eq!(b[1], Some(p.z[1]));
        assert!(world.decode_factors(&p.view_a_ids).iter().all(Option::is_some));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = make_splits(&WorldSpec::default(), 256, 64, 64, 7, false).unwrap();
        let mut seeds: Vec<u64> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.pairs.iter().map(|p| p.seed))
            .collect();
        assert_eq!(seeds.len(), 384);
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 384);
        // non-compositional splits are consecutive seeds from their base
        assert_eq!(s.val.pairs[3].seed, split_seed_base(7, 1) + 3);
    }

    #[test]
    fn compositional_test_latents_are_novel() {
        let s = make_splits(&WorldSpec::default(), 256, 64, 64, 1, true).unwrap();
        let train: std::collections::HashSet<Vec<usize>> = s.train.pairs.iter().map(|p| p.z.clone()).collect();
        assert!(s.test.pairs.iter().all(|p| !train.contains(&p.z)));
        // every factor value still occurs in train
        for f in 0..4 {
            for v in 0..8 {
                assert!(s.train.pairs.iter().any(|p| p.z[f] == v));
            }
        }
        let tiny = WorldSpec {
            num_factors: 1,
            shared_factors: vec![0],
            ..WorldSpec::default()
        };
        assert!(matches!(make_splits(&tiny, 4, 4, 4, 0, true), Err(Error::Config(_))));
    }

    #[test]
    fn world_validation_lists_every_problem() {
        let bad = WorldSpec {
            shared_factors: vec![],
            seq_len_min: 2,
            vocab: 10,
            ..WorldSpec::default()
        };
        match bad.check() {
            Err(Error::Config(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jsonl_export_round_trips_lines() {
        let s = make_splits(&WorldSpec::default(), 3, 1, 1, 0, false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        s.train.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["view_b"].as_array().unwrap().len(), s.train.pairs[0].view_b.len());
        assert_eq!(
            lines[1]["view_a"].as_array().unwrap().len(),
            s.train.pairs[1].view_a.shape()[0]
        );
    }
}
