//! Frequency-space action tokenizer for the autoregressive discrete head.
//!
//! Per action dimension the chunk is transformed with an orthonormal DCT-II
//! along time, low-frequency truncated, quantized to integers and mapped to a
//! small vocabulary. Token layout is dim-major with BOS first and EOS last.
//! Decoding is total: malformed sequences from a sampler are repaired
//! (truncate at EOS, zero-fill missing coefficients, map out-of-range tokens
//! to the zero symbol) and repairs are counted.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{ActionChunk, SpaceTag};

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FastTokenizerConfig {
    /// Quantization sharpness; larger = finer.
    pub gamma: f64,
    /// Maximum |quantized coefficient|.
    pub coeff_clip: i64,
    /// Low-frequency truncation; how many DCT coefficients to keep per dim.
    pub keep_coeffs: usize,
    /// Fraction of corpus coefficients allowed to clip during `fit`.
    pub max_clip_rate: f64,
}

impl Default for FastTokenizerConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            coeff_clip: 64,
            keep_coeffs: 0, // 0 = keep all (resolved to H at fit time)
            max_clip_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RepairReport {
    pub truncated_at_eos: bool,
    pub zero_filled: usize,
    pub out_of_range: usize,
}

impl RepairReport {
    pub fn total(&self) -> usize {
        self.zero_filled + self.out_of_range + usize::from(self.truncated_at_eos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastTokenizer {
    pub horizon: usize,
    pub dim: usize,
    pub gamma: f64,
    pub coeff_clip: i64,
    pub keep_coeffs: usize,
}

impl FastTokenizer {
    /// Coefficient tokens occupy [0, 2*clip]; BOS and EOS follow.
    pub fn vocab_size(&self) -> usize {
        2 * self.coeff_clip as usize + 1 + 2
    }

    pub fn zero_symbol(&self) -> usize {
        self.coeff_clip as usize
    }

    pub fn bos(&self) -> usize {
        2 * self.coeff_clip as usize + 1
    }

    pub fn eos(&self) -> usize {
        2 * self.coeff_clip as usize + 2
    }

    /// Full encoded length including BOS and EOS.
    pub fn sequence_len(&self) -> usize {
        self.dim * self.keep_coeffs + 2
    }

    /// Quantization-only round-trip RMSE bound (valid when nothing clips and
    /// keep_coeffs = H): each kept coefficient errs by at most 1/(2*gamma).
    pub fn quantization_bound(&self) -> f64 {
        (1.0 / (2.0 * self.gamma))
            * ((self.dim * self.keep_coeffs) as f64 / (self.horizon * self.dim) as f64).sqrt()
    }

    /// Fits gamma on a corpus of normalized chunks: the largest gamma whose
    /// clip rate stays at or below `cfg.max_clip_rate`. An all-zero corpus
    /// never clips; the default gamma is kept in that case.
    pub fn fit(corpus: &[ActionChunk], cfg: &FastTokenizerConfig) -> Result<Self> {
        let first = corpus.first().ok_or(Error::EmptyCorpus)?;
        let h = first.horizon();
        let d = first.dim();
        for c in corpus {
            if c.horizon() != h || c.dim() != d {
                return Err(Error::InconsistentShapes(format!(
                    "{}x{} vs {}x{}",
                    c.horizon(),
                    c.dim(),
                    h,
                    d
                )));
            }
        }
        let keep = if cfg.keep_coeffs == 0 {
            h
        } else {
            cfg.keep_coeffs.min(h)
        };
        let basis = dct_basis(h);

        // All kept coefficients of the corpus, magnitudes only.
        let mut mags: Vec<f64> = Vec::new();
        for chunk in corpus {
            for j in 0..d {
                let col: Vec<f64> = (0..h).map(|t| chunk.values[[t, j]]).collect();
                let coeffs = dct_forward(&col, &basis);
                for c in coeffs.iter().take(keep) {
                    mags.push(c.abs());
                }
            }
        }

        // A coefficient clips exactly when the encoder would clamp it.
        let clip = cfg.coeff_clip as f64;
        let clip_rate = |gamma: f64| -> f64 {
            let clipped = mags.iter().filter(|m| (gamma * **m).round() > clip).count();
            clipped as f64 / mags.len().max(1) as f64
        };

        let gamma_max = 1e6;
        let gamma = if clip_rate(gamma_max) <= cfg.max_clip_rate {
            cfg.gamma
        } else {
            let mut lo = 1e-4f64;
            let mut hi = gamma_max;
            for _ in 0..80 {
                let mid = ((lo.ln() + hi.ln()) / 2.0).exp();
                if clip_rate(mid) <= cfg.max_clip_rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };

        Ok(Self {
            horizon: h,
            dim: d,
            gamma,
            coeff_clip: cfg.coeff_clip,
            keep_coeffs: keep,
        })
    }

    pub fn encode(&self, chunk: &ActionChunk) -> Result<TokenSequence> {
        if chunk.horizon() != self.horizon || chunk.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.horizon, self.dim),
                got: format!("{}x{}", chunk.horizon(), chunk.dim()),
            });
        }
        let basis = dct_basis(self.horizon);
        let mut tokens = Vec::with_capacity(self.sequence_len());
        tokens.push(self.bos());
        for j in 0..self.dim {
            let col: Vec<f64> = (0..self.horizon).map(|t| chunk.values[[t, j]]).collect();
            let coeffs = dct_forward(&col, &basis);
            for c in coeffs.iter().take(self.keep_coeffs) {
                let q = (self.gamma * c).round() as i64;
                let q = q.clamp(-self.coeff_clip, self.coeff_clip);
                tokens.push((q + self.coeff_clip) as usize);
            }
        }
        tokens.push(self.eos());
        Ok(TokenSequence { tokens })
    }

    pub fn decode(&self, seq: &TokenSequence) -> (ActionChunk, RepairReport) {
        let mut report = RepairReport::default();
        let mut toks = seq.tokens.as_slice();
        if toks.first() == Some(&self.bos()) {
            toks = &toks[1..];
        }
        let want = self.dim * self.keep_coeffs;
        let mut coeff_tokens: Vec<i64> = Vec::with_capacity(want);
        let mut saw_eos = false;
        for &t in toks {
            if coeff_tokens.len() == want {
                break;
            }
            if t == self.eos() {
                saw_eos = true;
                break;
            }
            if t <= 2 * self.coeff_clip as usize {
                coeff_tokens.push(t as i64 - self.coeff_clip);
            } else {
                report.out_of_range += 1;
                coeff_tokens.push(0);
            }
        }
        if !saw_eos && coeff_tokens.len() == want {
            // ran to full length without EOS
            if toks.len() < want + 1 {
                report.truncated_at_eos = true;
            }
        }
        if coeff_tokens.len() < want {
            report.zero_filled = want - coeff_tokens.len();
            coeff_tokens.resize(want, 0);
        }

        let basis = dct_basis(self.horizon);
        let mut values = Array2::zeros((self.horizon, self.dim));
        for j in 0..self.dim {
            let mut coeffs = vec![0.0; self.horizon];
            for k in 0..self.keep_coeffs {
                coeffs[k] = coeff_tokens[j * self.keep_coeffs + k] as f64 / self.gamma;
            }
            let col = dct_inverse(&coeffs, &basis);
            for t in 0..self.horizon {
                values[[t, j]] = col[t];
            }
        }
        (ActionChunk::new(values, SpaceTag::Normalized), report)
    }

    /// Round-trip RMSE certificate for one specific chunk: quantization and
    /// clipping error of the kept coefficients plus the energy the chunk
    /// carries in the truncated ones. Orthonormality of the transform makes
    /// the coefficient-domain error equal the time-domain error.
    pub fn chunk_bound(&self, chunk: &ActionChunk) -> f64 {
        let basis = dct_basis(self.horizon);
        let mut energy = 0.0;
        for j in 0..self.dim {
            let col: Vec<f64> = (0..self.horizon).map(|t| chunk.values[[t, j]]).collect();
            let coeffs = dct_forward(&col, &basis);
            for (k, c) in coeffs.iter().enumerate() {
                if k < self.keep_coeffs {
                    let q = ((self.gamma * c).round() as i64).clamp(-self.coeff_clip, self.coeff_clip);
                    let e = c - q as f64 / self.gamma;
                    energy += e * e;
                } else {
                    energy += c * c;
                }
            }
        }
        (energy / (self.horizon * self.dim) as f64).sqrt()
    }

    pub fn serialize(&self) -> String {
        format!(
            "format_version={}\nhorizon={}\ndim={}\ngamma={}\ncoeff_clip={}\nkeep_coeffs={}\n",
            TOKENIZER_FORMAT_VERSION,
            self.horizon,
            self.dim,
            self.gamma,
            self.coeff_clip,
            self.keep_coeffs
        )
    }

    pub fn deserialize(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::config(format!("tokenizer.{k}"), "missing"))
        };
        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::config("tokenizer.format_version", "malformed"))?;
        if version != TOKENIZER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: TOKENIZER_FORMAT_VERSION,
                found: version,
            });
        }
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("tokenizer.{k}"), "malformed number"))
        };
        let parse_u = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::config(format!("tokenizer.{k}"), "malformed integer"))
        };
        Ok(Self {
            horizon: parse_u("horizon")?,
            dim: parse_u("dim")?,
            gamma: parse_f("gamma")?,
            coeff_clip: parse_u("coeff_clip")? as i64,
            keep_coeffs: parse_u("keep_coeffs")?,
        })
    }
}

/// Orthonormal DCT-II basis: basis[k][n] = s_k * cos(pi*(2n+1)*k / (2H)).
fn dct_basis(h: usize) -> Vec<Vec<f64>> {
    let mut basis = vec![vec![0.0; h]; h];
    for (k, row) in basis.iter_mut().enumerate() {
        let s = if k == 0 {
            (1.0 / h as f64).sqrt()
        } else {
            (2.0 / h as f64).sqrt()
        };
        for (n, b) in row.iter_mut().enumerate() {
            *b = s * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * h) as f64).cos();
        }
    }
    basis
}

fn dct_forward(x: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    basis
        .iter()
        .map(|row| row.iter().zip(x).map(|(b, v)| b * v).sum())
        .collect()
}

fn dct_inverse(coeffs: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let h = basis.len();
    (0..h)
        .map(|n| coeffs.iter().enumerate().map(|(k, c)| c * basis[k][n]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chunk(values: Array2<f64>) -> ActionChunk {
        ActionChunk::new(values, SpaceTag::Normalized)
    }

    fn random_chunk(rng: &mut ChaCha8Rng, h: usize, d: usize) -> ActionChunk {
        chunk(Array2::from_shape_fn((h, d), |_| rng.gen_range(-2.0..2.0)))
    }

    #[test]
    fn dct_is_orthonormal() {
        let h = 8;
        let basis = dct_basis(h);
        for k in 0..h {
            for l in 0..h {
                let dot: f64 = (0..h).map(|n| basis[k][n] * basis[l][n]).sum();
                let expect = if k == l { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "k={k} l={l} dot={dot}");
            }
        }
    }

    #[test]
    fn zero_corpus_uses_default_gamma() {
        let corpus = vec![chunk(Array2::zeros((8, 2))); 4];
        let tok = FastTokenizer::fit(&corpus, &FastTokenizerConfig::default()).unwrap();
        assert_eq!(tok.gamma, 10.0);
        let seq = tok.encode(&corpus[0]).unwrap();
        assert_eq!(seq.tokens[0], tok.bos());
        assert_eq!(*seq.tokens.last().unwrap(), tok.eos());
        assert!(seq.tokens[1..seq.tokens.len() - 1]
            .iter()
            .all(|t| *t == tok.zero_symbol()));
    }

    #[test]
    fn fitted_gamma_respects_clip_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<_> = (0..200).map(|_| random_chunk(&mut rng, 8, 2)).collect();
        let cfg = FastTokenizerConfig::default();
        let tok = FastTokenizer::fit(&corpus, &cfg).unwrap();
        // brute-force clip-rate count by re-encoding
        let basis = dct_basis(8);
        let mut clipped = 0usize;
        let mut total = 0usize;
        for c in &corpus {
            for j in 0..2 {
                let col: Vec<f64> = (0..8).map(|t| c.values[[t, j]]).collect();
                for coeff in dct_forward(&col, &basis) {
                    total += 1;
                    if (tok.gamma * coeff).round().abs() as i64 > tok.coeff_clip {
                        clipped += 1;
                    }
                }
            }
        }
        assert!(clipped as f64 / total as f64 <= cfg.max_clip_rate);
    }

    #[test]
    fn fit_is_stable_across_disjoint_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<_> = (0..400).map(|_| random_chunk(&mut rng, 8, 2)).collect();
        let b: Vec<_> = (0..400).map(|_| random_chunk(&mut rng, 8, 2)).collect();
        let cfg = FastTokenizerConfig::default();
        let ta = FastTokenizer::fit(&a, &cfg).unwrap();
        let tb = FastTokenizer::fit(&b, &cfg).unwrap();
        let rel = (ta.gamma - tb.gamma).abs() / ta.gamma;
        assert!(rel < 0.05, "gamma {} vs {} (rel {rel})", ta.gamma, tb.gamma);
    }

    #[test]
    fn constant_chunk_has_single_nonzero_token_per_dim() {
        let corpus = vec![chunk(Array2::from_elem((8, 2), 1.0))];
        let tok = FastTokenizer::fit(&corpus, &FastTokenizerConfig::default()).unwrap();
        let seq = tok.encode(&corpus[0]).unwrap();
        let body = &seq.tokens[1..seq.tokens.len() - 1];
        for j in 0..2 {
            let dim_toks = &body[j * 8..(j + 1) * 8];
            assert_ne!(dim_toks[0], tok.zero_symbol(), "DC coefficient must differ");
            assert!(dim_toks[1..].iter().all(|t| *t == tok.zero_symbol()));
        }
    }

    #[test]
    fn round_trip_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<_> = (0..50).map(|_| random_chunk(&mut rng, 8, 3)).collect();
        let tok = FastTokenizer::fit(&corpus, &FastTokenizerConfig::default()).unwrap();
        for c in &corpus {
            let (back, report) = tok.decode(&tok.encode(c).unwrap());
            assert_eq!(report.total(), 0);
            let rmse = rmse(c, &back);
            assert!(rmse <= tok.chunk_bound(c) + 1e-12, "rmse {rmse}");
        }
    }

    #[test]
    fn high_gamma_full_keep_is_near_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // gamma huge but coefficients bounded: raise coeff_clip so nothing clips
        let tok = FastTokenizer {
            horizon: 8,
            dim: 2,
            gamma: 1e6,
            coeff_clip: 10_000_000,
            keep_coeffs: 8,
        };
        for _ in 0..20 {
            let c = random_chunk(&mut rng, 8, 2);
            let (back, _) = tok.decode(&tok.encode(&c).unwrap());
            assert!(rmse(&c, &back) < 1e-5);
        }
    }

    #[test]
    fn monotone_fidelity_in_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let corpus: Vec<_> = (0..50).map(|_| random_chunk(&mut rng, 8, 2)).collect();
        let mut last = f64::INFINITY;
        for gamma in [5.0, 20.0, 80.0] {
            let tok = FastTokenizer {
                horizon: 8,
                dim: 2,
                gamma,
                coeff_clip: 100_000,
                keep_coeffs: 8,
            };
            let total: f64 = corpus
                .iter()
                .map(|c| rmse(c, &tok.decode(&tok.encode(c).unwrap()).0))
                .sum();
            assert!(total <= last + 1e-12, "fidelity regressed at gamma={gamma}");
            last = total;
        }
    }

    #[test]
    fn repair_policy_is_total() {
        let tok = FastTokenizer {
            horizon: 8,
            dim: 2,
            gamma: 10.0,
            coeff_clip: 64,
            keep_coeffs: 4,
        };
        // all-zero-symbol body decodes to the zero chunk
        let mut toks = vec![tok.bos()];
        toks.extend(std::iter::repeat(tok.zero_symbol()).take(8));
        toks.push(tok.eos());
        let (c, rep) = tok.decode(&TokenSequence { tokens: toks });
        assert!(c.values.iter().all(|v| *v == 0.0));
        assert_eq!(rep.total(), 0);

        // short sequence: zero-filled
        let (c, rep) = tok.decode(&TokenSequence {
            tokens: vec![tok.bos(), tok.zero_symbol() + 1, tok.eos()],
        });
        assert_eq!(rep.zero_filled, 7);
        assert!(c.values.iter().all(|v| v.is_finite()));

        // garbage token: out-of-range repair
        let (_, rep) = tok.decode(&TokenSequence {
            tokens: vec![tok.bos(), 9999, tok.eos()],
        });
        assert_eq!(rep.out_of_range, 1);
    }

    #[test]
    fn encode_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let c = random_chunk(&mut rng, 8, 2);
        let tok = FastTokenizer {
            horizon: 8,
            dim: 2,
            gamma: 10.0,
            coeff_clip: 64,
            keep_coeffs: 8,
        };
        assert_eq!(tok.encode(&c).unwrap(), tok.encode(&c).unwrap());
    }

    #[test]
    fn serialization_round_trip() {
        let tok = FastTokenizer {
            horizon: 8,
            dim: 3,
            gamma: 42.125,
            coeff_clip: 64,
            keep_coeffs: 6,
        };
        let back = FastTokenizer::deserialize(&tok.serialize()).unwrap();
        assert_eq!(tok, back);
    }

    fn rmse(a: &ActionChunk, b: &ActionChunk) -> f64 {
        let diff = &a.values - &b.values;
        (diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64).sqrt()
    }
}
