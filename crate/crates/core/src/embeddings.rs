//! Token embeddings, the frozen lookup-table text encoder, and the noise
//! policies applied to embeddings on every training iteration.
//!
//! | policy | per-token effect |
//! |--------|------------------|
//! | `None` | unchanged |
//! | `Gn(W)` | `tau + xi`, `xi ~ N(0, W^2 I)` |
//! | `Fpan(W, P)` | `tau + z * xi`, one `z ~ Bernoulli(P)` per token |
//! | `Cpan(W, P)` | `tau + z * xi`, one `z ~ Bernoulli(P)` for the whole sequence |
//! | `Rm(Q)` | `m * tau`, one `m ~ Bernoulli(1 - Q)` per token |

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PrngStream;

/// An `L x d` matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSequence {
    tokens: Array2<f64>,
    caption_len: usize,
}

impl TokenEmbeddingSequence {
    /// Wraps a raw matrix. `caption_len` marks how many leading rows are real
    /// tokens; the rest are padding.
    pub fn new(tokens: Array2<f64>, caption_len: usize) -> Result<Self> {
        let (len, dim) = tokens.dim();
        if len == 0 || dim == 0 {
            return Err(Error::ShapeError(format!(
                "token embedding sequence must be non-empty, got {len}x{dim}"
            )));
        }
        if caption_len > len {
            return Err(Error::TooLong {
                len: caption_len,
                max: len,
            });
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("non-finite token embedding".into()));
        }
        Ok(Self { tokens, caption_len })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn caption_len(&self) -> usize {
        self.caption_len
    }

    pub fn tokens(&self) -> &Array2<f64> {
        &self.tokens
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.tokens.row(i)
    }

    /// Mean over the `L` rows: the pooled conditioning vector.
    pub fn mean_pooled(&self) -> Array1<f64> {
        let mut acc = Array1::<f64>::zeros(self.dim());
        for row in self.tokens.rows() {
            acc += &row;
        }
        acc / self.len() as f64
    }
}

/// Frozen token-embedding table standing in for a pretrained text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    table: Array2<f64>,
    pad_token_id: u32,
}

impl Vocabulary {
    /// Draws a `size x dim` table of standard normal entries from `stream`.
    pub fn generate(size: usize, dim: usize, pad_token_id: u32, stream: &mut PrngStream) -> Self {
        assert!(size > 0 && dim > 0);
        assert!((pad_token_id as usize) < size);
        let table = Array2::from_shape_simple_fn((size, dim), || stream.gaussian());
        Self { table, pad_token_id }
    }

    pub fn from_table(table: Array2<f64>, pad_token_id: u32) -> Result<Self> {
        if table.nrows() == 0 || table.ncols() == 0 || pad_token_id as usize >= table.nrows() {
            return Err(Error::ShapeError("invalid vocabulary table".into()));
        }
        Ok(Self { table, pad_token_id })
    }

    pub fn size(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn pad_token_id(&self) -> u32 {
        self.pad_token_id
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }
}

/// Looks up each token and pads to `max_len` with the pad embedding.
pub fn encode_caption(caption: &[u32], vocab: &Vocabulary, max_len: usize) -> Result<TokenEmbeddingSequence> {
    if caption.len() > max_len {
        return Err(Error::TooLong {
            len: caption.len(),
            max: max_len,
        });
    }
    if let Some(&id) = caption.iter().find(|&&id| id as usize >= vocab.size()) {
        return Err(Error::UnknownToken {
            id,
            vocab_size: vocab.size(),
        });
    }
    let mut tokens = Array2::<f64>::zeros((max_len, vocab.dim()));
    for (i, mut row) in tokens.rows_mut().into_iter().enumerate() {
        let id = caption.get(i).copied().unwrap_or(vocab.pad_token_id);
        row.assign(&vocab.table.row(id as usize));
    }
    TokenEmbeddingSequence::new(tokens, caption.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    None,
    Gn,
    Fpan,
    Cpan,
    Rm,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::None => "none",
            PolicyKind::Gn => "gn",
            PolicyKind::Fpan => "fpan",
            PolicyKind::Cpan => "cpan",
            PolicyKind::Rm => "rm",
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PolicyKind::None),
            "gn" => Ok(PolicyKind::Gn),
            "fpan" => Ok(PolicyKind::Fpan),
            "cpan" => Ok(PolicyKind::Cpan),
            "rm" => Ok(PolicyKind::Rm),
            other => Err(Error::InvalidPolicy(format!("unknown policy kind {other:?}"))),
        }
    }
}

/// Noise or masking applied to token embeddings during training.
///
/// Serialized as `{"kind": .., "w": .., "p": .., "q": ..}` with `null` for
/// parameters the kind does not use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRecord", into = "PolicyRecord")]
pub enum NoisePolicy {
    None,
    Gn { w: f64 },
    Fpan { w: f64, p: f64 },
    Cpan { w: f64, p: f64 },
    Rm { q: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub kind: PolicyKind,
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub q: Option<f64>,
}

impl From<NoisePolicy> for PolicyRecord {
    fn from(p: NoisePolicy) -> Self {
        PolicyRecord {
            kind: p.kind(),
            w: p.w(),
            p: p.p(),
            q: p.q(),
        }
    }
}

impl TryFrom<PolicyRecord> for NoisePolicy {
    type Error = Error;

    fn try_from(r: PolicyRecord) -> Result<Self> {
        NoisePolicy::from_parts(r.kind, r.w, r.p, r.q)
    }
}

impl NoisePolicy {
    /// Builds a policy from a kind and whichever parameters it needs.
    /// Parameters the kind does not use are ignored.
    pub fn from_parts(kind: PolicyKind, w: Option<f64>, p: Option<f64>, q: Option<f64>) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::InvalidPolicy(format!("{kind} requires parameter {name}")))
        };
        let policy = match kind {
            PolicyKind::None => NoisePolicy::None,
            PolicyKind::Gn => NoisePolicy::Gn { w: need(w, "w")? },
            PolicyKind::Fpan => NoisePolicy::Fpan {
                w: need(w, "w")?,
                p: need(p, "p")?,
            },
            PolicyKind::Cpan => NoisePolicy::Cpan {
                w: need(w, "w")?,
                p: need(p, "p")?,
            },
            PolicyKind::Rm => NoisePolicy::Rm { q: need(q, "q")? },
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        let check_w = |w: f64| {
            if w.is_finite() && w >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidPolicy(format!("noise intensity w = {w} must be >= 0")))
            }
        };
        let check_prob = |v: f64, name: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidPolicy(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        match *self {
            NoisePolicy::None => Ok(()),
            NoisePolicy::Gn { w } => check_w(w),
            NoisePolicy::Fpan { w, p } | NoisePolicy::Cpan { w, p } => {
                check_w(w)?;
                check_prob(p, "p")
            }
            NoisePolicy::Rm { q } => check_prob(q, "q"),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            NoisePolicy::None => PolicyKind::None,
            NoisePolicy::Gn { .. } => PolicyKind::Gn,
            NoisePolicy::Fpan { .. } => PolicyKind::Fpan,
            NoisePolicy::Cpan { .. } => PolicyKind::Cpan,
            NoisePolicy::Rm { .. } => PolicyKind::Rm,
        }
    }

    pub fn w(&self) -> Option<f64> {
        match *self {
            NoisePolicy::Gn { w } | NoisePolicy::Fpan { w, .. } | NoisePolicy::Cpan { w, .. } => Some(w),
            _ => None,
        }
    }

    pub fn p(&self) -> Option<f64> {
        match *self {
            NoisePolicy::Fpan { p, .. } | NoisePolicy::Cpan { p, .. } => Some(p),
            _ => None,
        }
    }

    pub fn q(&self) -> Option<f64> {
        match *self {
            NoisePolicy::Rm { q } => Some(q),
            _ => None,
        }
    }
}

impl std::fmt::Display for NoisePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            NoisePolicy::None => write!(f, "none"),
            NoisePolicy::Gn { w } => write!(f, "gn(w={w})"),
            NoisePolicy::Fpan { w, p } => write!(f, "fpan(w={w}, p={p})"),
            NoisePolicy::Cpan { w, p } => write!(f, "cpan(w={w}, p={p})"),
            NoisePolicy::Rm { q } => write!(f, "rm(q={q})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyOptions {
    /// Apply the policy to padding rows as well as caption tokens.
    pub noise_on_padding: bool,
}

impl Default for PolicyOptions {
    fn default() -> Self {
        Self { noise_on_padding: true }
    }
}

/// Output of [`apply_policy_traced`]: the perturbed sequence and, per token,
/// whether the policy touched it (noise gate open, or token masked).
#[derive(Debug, Clone)]
pub struct PolicyTrace {
    pub sequence: TokenEmbeddingSequence,
    pub gates: Vec<bool>,
}

/// Applies `policy` with default options, returning a fresh sequence.
pub fn apply_policy(
    seq: &TokenEmbeddingSequence,
    policy: &NoisePolicy,
    stream: &mut PrngStream,
) -> TokenEmbeddingSequence {
    apply_policy_traced(seq, policy, stream, PolicyOptions::default()).sequence
}

/// Applies `policy` and records the gate variables.
///
/// Draw order: FPAN draws each token's gate then, if open, its `d` noise
/// values; CPAN draws one gate then `L * d` noise values if open; GN draws
/// `L * d` noise values; RM draws one uniform per token. With
/// `noise_on_padding == false`, padding rows are skipped without drawing.
pub fn apply_policy_traced(
    seq: &TokenEmbeddingSequence,
    policy: &NoisePolicy,
    stream: &mut PrngStream,
    opts: PolicyOptions,
) -> PolicyTrace {
    let mut out = seq.tokens.clone();
    let active = if opts.noise_on_padding {
        seq.len()
    } else {
        seq.caption_len
    };
    let mut gates = vec![false; seq.len()];

    let add_noise = |row: &mut ndarray::ArrayViewMut1<f64>, w: f64, stream: &mut PrngStream| {
        for v in row.iter_mut() {
            *v += w * stream.gaussian();
        }
    };

    match *policy {
        NoisePolicy::None => {}
        NoisePolicy::Gn { w } => {
            for (i, mut row) in out.rows_mut().into_iter().enumerate().take(active) {
                add_noise(&mut row, w, stream);
                gates[i] = true;
            }
        }
        NoisePolicy::Fpan { w, p } => {
            for (i, mut row) in out.rows_mut().into_iter().enumerate().take(active) {
                if stream.bernoulli(p) {
                    add_noise(&mut row, w, stream);
                    gates[i] = true;
                }
            }
        }
        NoisePolicy::Cpan { w, p } => {
            if active > 0 && stream.bernoulli(p) {
                for (i, mut row) in out.rows_mut().into_iter().enumerate().take(active) {
                    add_noise(&mut row, w, stream);
                    gates[i] = true;
                }
            }
        }
        NoisePolicy::Rm { q } => {
            for (i, mut row) in out.rows_mut().into_iter().enumerate().take(active) {
                if stream.bernoulli(q) {
                    row.fill(0.0);
                    gates[i] = true;
                }
            }
        }
    }

    PolicyTrace {
        sequence: TokenEmbeddingSequence {
            tokens: out,
            caption_len: seq.caption_len,
        },
        gates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::stats::{ks_two_sample, mean_and_variance};
    use crate::numerics::StreamId;

    fn vocab() -> Vocabulary {
        Vocabulary::generate(12, 6, 0, &mut PrngStream::new(1, StreamId::DataGen))
    }

    /// Sequence whose entries are i.i.d. N(mean, std^2).
    fn population_sequence(
        len: usize,
        dim: usize,
        mean: f64,
        std: f64,
        stream: &mut PrngStream,
    ) -> TokenEmbeddingSequence {
        let t = Array2::from_shape_simple_fn((len, dim), || mean + std * stream.gaussian());
        TokenEmbeddingSequence::new(t, len).unwrap()
    }

    fn pooled_entries(policy: NoisePolicy, n: usize, mean: f64, std: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut pop = PrngStream::new(seed, StreamId::DataGen);
        let mut noise = PrngStream::new(seed, StreamId::PolicyNoise);
        let (mut before, mut after) = (Vec::with_capacity(n), Vec::with_capacity(n));
        while before.len() < n {
            let seq = population_sequence(8, 16, mean, std, &mut pop);
            let out = apply_policy(&seq, &policy, &mut noise);
            before.extend(seq.tokens().iter());
            after.extend(out.tokens().iter());
        }
        (before, after)
    }

    #[test]
    fn empty_caption_is_all_padding() {
        let v = vocab();
        let seq = encode_caption(&[], &v, 4).unwrap();
        for row in seq.tokens().rows() {
            assert_eq!(row, v.table().row(0));
        }
        assert_eq!(seq.caption_len(), 0);
    }

    #[test]
    fn caption_rows_are_lookups() {
        let v = vocab();
        let seq = encode_caption(&[3, 7], &v, 4).unwrap();
        assert_eq!(seq.row(0), v.table().row(3));
        assert_eq!(seq.row(1), v.table().row(7));
        assert_eq!(seq.row(2), v.table().row(0));
        assert_eq!(seq.row(3), v.table().row(0));
        assert_eq!(seq, encode_caption(&[3, 7], &v, 4).unwrap());
    }

    #[test]
    fn encode_errors() {
        let v = vocab();
        assert!(matches!(
            encode_caption(&[12], &v, 4),
            Err(Error::UnknownToken { id: 12, .. })
        ));
        assert!(matches!(
            encode_caption(&[1, 2, 3], &v, 2),
            Err(Error::TooLong { len: 3, max: 2 })
        ));
    }

    #[test]
    fn closed_gates_are_identity() {
        let mut pop = PrngStream::new(2, StreamId::DataGen);
        let mut noise = PrngStream::new(2, StreamId::PolicyNoise);
        let seq = population_sequence(8, 4, 0.0, 1.0, &mut pop);
        for policy in [
            NoisePolicy::None,
            NoisePolicy::Fpan { w: 2.0, p: 0.0 },
            NoisePolicy::Cpan { w: 2.0, p: 0.0 },
            NoisePolicy::Rm { q: 0.0 },
            NoisePolicy::Gn { w: 0.0 },
        ] {
            assert_eq!(apply_policy(&seq, &policy, &mut noise), seq, "{policy}");
        }
    }

    #[test]
    fn full_masking_zeroes_everything() {
        let mut pop = PrngStream::new(3, StreamId::DataGen);
        let seq = population_sequence(8, 4, 0.5, 1.0, &mut pop);
        let out = apply_policy(
            &seq,
            &NoisePolicy::Rm { q: 1.0 },
            &mut PrngStream::new(3, StreamId::PolicyNoise),
        );
        assert!(out.tokens().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_draws_each_call() {
        let mut pop = PrngStream::new(4, StreamId::DataGen);
        let mut noise = PrngStream::new(4, StreamId::PolicyNoise);
        let seq = population_sequence(8, 4, 0.0, 1.0, &mut pop);
        let p = NoisePolicy::Gn { w: 1.0 };
        assert_ne!(apply_policy(&seq, &p, &mut noise), apply_policy(&seq, &p, &mut noise));
    }

    #[test]
    fn padding_can_be_spared() {
        let v = vocab();
        let seq = encode_caption(&[1, 2], &v, 6).unwrap();
        let trace = apply_policy_traced(
            &seq,
            &NoisePolicy::Gn { w: 1.0 },
            &mut PrngStream::new(5, StreamId::PolicyNoise),
            PolicyOptions {
                noise_on_padding: false,
            },
        );
        assert_eq!(trace.gates, vec![true, true, false, false, false, false]);
        for i in 2..6 {
            assert_eq!(trace.sequence.row(i), seq.row(i));
        }
        assert_ne!(trace.sequence.row(0), seq.row(0));
    }

    #[test]
    fn cpan_couples_all_tokens() {
        let mut pop = PrngStream::new(6, StreamId::DataGen);
        let mut noise = PrngStream::new(6, StreamId::PolicyNoise);
        let seq = population_sequence(8, 4, 0.0, 1.0, &mut pop);
        let mut opened = 0;
        for _ in 0..2000 {
            let trace = apply_policy_traced(
                &seq,
                &NoisePolicy::Cpan { w: 1.0, p: 0.5 },
                &mut noise,
                PolicyOptions::default(),
            );
            let n_open = trace.gates.iter().filter(|&&g| g).count();
            assert!(n_open == 0 || n_open == seq.len());
            for (i, &g) in trace.gates.iter().enumerate() {
                assert_eq!(g, trace.sequence.row(i) != seq.row(i));
            }
            opened += (n_open > 0) as usize;
        }
        assert!((800..1200).contains(&opened));
    }

    #[test]
    fn fpan_gate_fraction_converges_to_p() {
        let mut pop = PrngStream::new(7, StreamId::DataGen);
        let mut noise = PrngStream::new(7, StreamId::PolicyNoise);
        let seq = population_sequence(8, 4, 0.0, 1.0, &mut pop);
        let p = 0.3;
        let (mut open, mut total) = (0usize, 0usize);
        for _ in 0..5000 {
            let trace = apply_policy_traced(
                &seq,
                &NoisePolicy::Fpan { w: 1.0, p },
                &mut noise,
                PolicyOptions::default(),
            );
            open += trace.gates.iter().filter(|&&g| g).count();
            total += trace.gates.len();
        }
        let frac = open as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((frac - p).abs() < 3.0 * sigma, "{frac}");
    }

    #[test]
    fn fpan_moments_on_reference_population() {
        let (mu, sigma) = (-0.1674, 1.0306);
        let (_, after) = pooled_entries(NoisePolicy::Fpan { w: 1.7, p: 0.6 }, 1_000_000, mu, sigma, 8);
        let (m, v) = mean_and_variance(&after);
        assert!((m - mu).abs() < 0.01, "mean {m}");
        assert!((v.sqrt() / 1.6722 - 1.0).abs() < 0.02, "std {}", v.sqrt());
    }

    #[test]
    fn rm_mean_on_reference_population() {
        let (mu, sigma) = (-0.1674, 1.0306);
        let (_, after) = pooled_entries(NoisePolicy::Rm { q: 0.5 }, 1_000_000, mu, sigma, 9);
        let (m, _) = mean_and_variance(&after);
        assert!((m - -0.0837).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn variance_laws() {
        let (mu, sigma) = (0.4, 0.8);
        let n = 1_000_000;
        for (w, p) in [(1.0, 0.5), (2.0, 0.2), (0.5, 1.0)] {
            let (before, after) = pooled_entries(NoisePolicy::Fpan { w, p }, n, mu, sigma, 10);
            let (m0, v0) = mean_and_variance(&before);
            let (m1, v1) = mean_and_variance(&after);
            assert!((v1 / (v0 + p * w * w) - 1.0).abs() < 0.02);
            let band = 3.0 * (v1 / n as f64).sqrt() * 3.0;
            assert!((m1 - m0).abs() < band);
        }
        for q in [0.2, 0.5, 0.8] {
            let (before, after) = pooled_entries(NoisePolicy::Rm { q }, n, mu, sigma, 11);
            let (m0, v0) = mean_and_variance(&before);
            let (m1, v1) = mean_and_variance(&after);
            let pred_m = (1.0 - q) * m0;
            let pred_v = (1.0 - q) * v0 + q * (1.0 - q) * m0 * m0;
            assert!((m1 / pred_m - 1.0).abs() < 0.02, "q {q}: {m1} vs {pred_m}");
            assert!((v1 / pred_v - 1.0).abs() < 0.02, "q {q}: {v1} vs {pred_v}");
        }
    }

    #[test]
    fn gn_fpan_cpan_agree_at_full_probability() {
        let n = 100_000;
        let (_, gn) = pooled_entries(NoisePolicy::Gn { w: 1.3 }, n, 0.1, 1.0, 12);
        let (_, fpan) = pooled_entries(NoisePolicy::Fpan { w: 1.3, p: 1.0 }, n, 0.1, 1.0, 13);
        let (_, cpan) = pooled_entries(NoisePolicy::Cpan { w: 1.3, p: 1.0 }, n, 0.1, 1.0, 14);
        assert!(!ks_two_sample(&gn, &fpan, 0.001).rejects());
        assert!(!ks_two_sample(&gn, &cpan, 0.001).rejects());
        assert!(!ks_two_sample(&fpan, &cpan, 0.001).rejects());
    }

    #[test]
    fn policy_wire_format() {
        let p = NoisePolicy::Fpan { w: 1.7, p: 0.6 };
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"kind":"fpan","w":1.7,"p":0.6,"q":null}"#);
        let back: NoisePolicy = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let rm: NoisePolicy = serde_json::from_str(r#"{"kind":"rm","q":0.5}"#).unwrap();
        assert_eq!(rm, NoisePolicy::Rm { q: 0.5 });
        assert!(serde_json::from_str::<NoisePolicy>(r#"{"kind":"cpan","w":1.0}"#).is_err());
        assert!(serde_json::from_str::<NoisePolicy>(r#"{"kind":"rm","q":1.5}"#).is_err());
    }
}
