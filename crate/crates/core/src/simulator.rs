//! Synthetic paired embeddings with identity structure and a text-side shift.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{normalize_row_into, save_embeddings, EmbeddingSet, Modality};
use crate::par;
use crate::retrieval::TopKIndex;
use crate::seed;

pub const TEXT_FILE: &str = "text.ueb";
pub const IMAGE_FILE: &str = "image.ueb";
pub const SPEC_FILE: &str = "spec.json";

/// Transform applied to every text row after sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Angle used in each rotation plane, in radians.
    pub rotation_angle: f64,
    pub n_planes: usize,
    /// Per-dim scale factors are log-uniform on `[1 - j, 1 + j]`.
    pub scale_jitter: f64,
    pub bias_sigma: f64,
    pub noise_sigma: f64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec {
            rotation_angle: 0.0,
            n_planes: 0,
            scale_jitter: 0.0,
            bias_sigma: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation_angle: PI / 6.0,
            n_planes: 8,
            scale_jitter: 0.2,
            bias_sigma: 0.05,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub texts_per_identity: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around the identity prototype.
    pub intra_noise_sigma: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 100,
            images_per_identity: 5,
            texts_per_identity: 2,
            dim: 64,
            intra_noise_sigma: 0.19,
            shift: ShiftSpec::default(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_identities == 0
            || self.images_per_identity == 0
            || self.texts_per_identity == 0
            || self.dim == 0
        {
            return bad("identity, per-identity and dim counts must be at least 1".into());
        }
        if i32::try_from(self.n_identities).is_err() {
            return bad(format!("{} identities do not fit i32 labels", self.n_identities));
        }
        let sh = &self.shift;
        for (name, v) in [
            ("intra_noise_sigma", self.intra_noise_sigma),
            ("bias_sigma", sh.bias_sigma),
            ("noise_sigma", sh.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..=PI).contains(&sh.rotation_angle) {
            return bad("rotation_angle must lie in [0, π]".into());
        }
        if 2 * sh.n_planes > self.dim {
            return bad(format!(
                "{} rotation planes need {} dimensions, have {}",
                sh.n_planes,
                2 * sh.n_planes,
                self.dim
            ));
        }
        if !(0.0..1.0).contains(&sh.scale_jitter) {
            return bad("scale_jitter must lie in [0, 1)".into());
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Drawn once per dataset from the spec seed.
struct Shift {
    planes: Vec<(Vec<f64>, Vec<f64>)>,
    cos: f64,
    sin: f64,
    scale: Vec<f64>,
    bias: Vec<f64>,
    noise_sigma: f64,
}

impl Shift {
    fn draw(spec: &SyntheticSpec) -> Shift {
        let mut rng = seed::rng(spec.seed, "shift");
        let sh = &spec.shift;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * sh.n_planes);
        while basis.len() < 2 * sh.n_planes {
            let mut v = gaussian(&mut rng, spec.dim, 1.0);
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            if dot(&v, &v) > 1e-12 {
                basis.push(unit(v));
            }
        }
        let planes = basis
            .chunks_exact(2)
            .map(|p| (p[0].clone(), p[1].clone()))
            .collect();
        let (lo, hi) = ((1.0 - sh.scale_jitter).ln(), (1.0 + sh.scale_jitter).ln());
        let scale = (0..spec.dim)
            .map(|_| {
                if hi > lo {
                    rng.random_range(lo..hi).exp()
                } else {
                    1.0
                }
            })
            .collect();
        let bias = gaussian(&mut rng, spec.dim, sh.bias_sigma);
        Shift {
            planes,
            cos: sh.rotation_angle.cos(),
            sin: sh.rotation_angle.sin(),
            scale,
            bias,
            noise_sigma: sh.noise_sigma,
        }
    }

    fn apply(&self, x: &mut [f64], rng: &mut ChaCha8Rng) {
        for (a, b) in &self.planes {
            let (p, r) = (dot(x, a), dot(x, b));
            let (dp, dr) = (p * self.cos - r * self.sin - p, p * self.sin + r * self.cos - r);
            for ((xi, ai), bi) in x.iter_mut().zip(a).zip(b) {
                *xi += dp * ai + dr * bi;
            }
        }
        let noise = gaussian(rng, x.len(), self.noise_sigma);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = *xi * self.scale[i] + self.bias[i] + noise[i];
        }
    }
}

struct IdentityRows {
    images: Vec<f32>,
    texts: Vec<f32>,
}

fn sample_row(rng: &mut ChaCha8Rng, proto: &[f64], sigma: f64) -> Vec<f64> {
    let mut x = gaussian(rng, proto.len(), sigma);
    x.iter_mut().zip(proto).for_each(|(n, p)| *n += p);
    x
}

fn push_normalized(out: &mut Vec<f32>, x: &[f64]) {
    let mut row = vec![0f32; x.len()];
    // A zero row has probability zero under Gaussian noise; fall back to e_0.
    if normalize_row_into(x, &mut row).is_none() {
        row[0] = 1.0;
    }
    out.extend(row);
}

fn identity_rows(spec: &SyntheticSpec, shift: &Shift, id: usize) -> IdentityRows {
    let mut rng = seed::rng_indexed(spec.seed, "identity", id as u64);
    let proto = unit(gaussian(&mut rng, spec.dim, 1.0));
    let sigma = spec.intra_noise_sigma;
    let mut images = Vec::with_capacity(spec.images_per_identity * spec.dim);
    for _ in 0..spec.images_per_identity {
        push_normalized(&mut images, &sample_row(&mut rng, &proto, sigma));
    }
    let mut texts = Vec::with_capacity(spec.texts_per_identity * spec.dim);
    for _ in 0..spec.texts_per_identity {
        let mut x = unit(sample_row(&mut rng, &proto, sigma));
        shift.apply(&mut x, &mut rng);
        push_normalized(&mut texts, &x);
    }
    IdentityRows { images, texts }
}

/// Text and image sets, identity-major, labelled with the identity index.
pub fn generate(spec: &SyntheticSpec) -> Result<(EmbeddingSet, EmbeddingSet)> {
    spec.validate()?;
    let shift = Shift::draw(spec);
    let rows = par::map_range(spec.n_identities, |id| identity_rows(spec, &shift, id));
    let (mut text, mut image) = (Vec::new(), Vec::new());
    for r in rows {
        text.extend(r.texts);
        image.extend(r.images);
    }
    let side = |modality, per: usize, prefix: &str, data| {
        let n = spec.n_identities * per;
        EmbeddingSet::new(
            modality,
            spec.dim,
            data,
            (0..n)
                .map(|i| format!("{prefix}_{:05}_{}", i / per, i % per))
                .collect(),
            Some((0..n).map(|i| (i / per) as i32).collect()),
            true,
        )
    };
    Ok((
        side(Modality::Text, spec.texts_per_identity, "txt", text)?,
        side(Modality::Image, spec.images_per_identity, "img", image)?,
    ))
}

/// Writes both sets as UEB1 plus a JSON copy of the spec into `dir`.
pub fn write_dataset(
    spec: &SyntheticSpec,
    text: &EmbeddingSet,
    image: &EmbeddingSet,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_embeddings(text, dir.join(TEXT_FILE))?;
    save_embeddings(image, dir.join(IMAGE_FILE))?;
    let path = dir.join(SPEC_FILE);
    let mut json = serde_json::to_string_pretty(spec)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PairTag {
    TruePositive,
    FalsePositive,
}

impl PairTag {
    pub fn is_false_positive(self) -> bool {
        self == PairTag::FalsePositive
    }
}

/// TP/FP tag of each query's rank-1 item.
pub fn label_pairs(
    ranking: &TopKIndex,
    query_labels: Option<&[i32]>,
    gallery_labels: Option<&[i32]>,
) -> Result<Vec<PairTag>> {
    let ql = query_labels.ok_or(Error::MissingLabels("query"))?;
    let gl = gallery_labels.ok_or(Error::MissingLabels("gallery"))?;
    if ql.len() != ranking.n_queries() {
        return Err(Error::LengthMismatch {
            left: ql.len(),
            right: ranking.n_queries(),
        });
    }
    if gl.len() != ranking.gallery_len() {
        return Err(Error::LengthMismatch {
            left: gl.len(),
            right: ranking.gallery_len(),
        });
    }
    Ok((0..ranking.n_queries())
        .map(|q| {
            if gl[ranking.row(q)[0]] == ql[q] {
                PairTag::TruePositive
            } else {
                PairTag::FalsePositive
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{cosine_similarity, evaluate, topk, Direction, Provenance, SimilarityMatrix};

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_identities: 20,
            dim: 16,
            shift: ShiftSpec {
                n_planes: 4,
                ..Default::default()
            },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn shapes_labels_and_norms() {
        let (t, i) = generate(&small(3)).unwrap();
        assert_eq!((t.count(), i.count()), (40, 100));
        assert_eq!(t.labels().unwrap()[39], 19);
        assert_eq!(i.ids()[7], "img_00001_2");
        for r in 0..t.count() {
            let n: f64 = t.row(r).iter().map(|&v| f64::from(v).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn same_spec_same_bytes() {
        assert_eq!(generate(&small(5)).unwrap(), generate(&small(5)).unwrap());
        assert_ne!(generate(&small(5)).unwrap(), generate(&small(6)).unwrap());
    }

    #[test]
    fn null_shift_is_easy() {
        let spec = SyntheticSpec {
            intra_noise_sigma: 0.05,
            shift: ShiftSpec::none(),
            ..Default::default()
        };
        let (t, i) = generate(&spec).unwrap();
        let s = cosine_similarity(&t, &i).unwrap();
        let m = evaluate(&s, t.labels(), i.labels()).unwrap();
        assert!(m.r1 >= 0.95, "r1 = {}", m.r1);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(0);
        s.shift.rotation_angle = 4.0;
        assert!(generate(&s).is_err());
        let mut s = small(0);
        s.shift.n_planes = 9;
        assert!(generate(&s).is_err());
        let mut s = small(0);
        s.texts_per_identity = 0;
        assert!(generate(&s).is_err());
    }

    #[test]
    fn tags_follow_rank_one() {
        let s = SimilarityMatrix::new(
            3,
            3,
            vec![0.9, 0.1, 0.0, 0.1, 0.9, 0.0, 0.9, 0.0, 0.1],
            Provenance::Cosine,
        )
        .unwrap();
        let r = topk(&s, 1, Direction::T2I).unwrap();
        let tags = label_pairs(&r, Some(&[0, 1, 2]), Some(&[0, 1, 2])).unwrap();
        use PairTag::*;
        assert_eq!(tags, vec![TruePositive, TruePositive, FalsePositive]);
        assert!(matches!(
            label_pairs(&r, None, Some(&[0, 1, 2])),
            Err(Error::MissingLabels("query"))
        ));
    }
}
