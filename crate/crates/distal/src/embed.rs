//! Text vectorization through the embedding provider.

use distal_core::math::normalize;
use distal_core::Error as CoreError;

use crate::error::Result;
use crate::providers::Providers;

/// Embeds `texts` and normalizes each vector to unit length. When `dim` is
/// given, every vector must have that dimension.
pub fn embed_batch(
    providers: &Providers,
    texts: &[String],
    dim: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    if texts.is_empty() {
        return Err(CoreError::EmptyBatch.into());
    }
    let mut vectors = providers.embed(texts)?;
    if vectors.len() != texts.len() {
        return Err(CoreError::DimensionMismatch {
            expected: texts.len(),
            actual: vectors.len(),
        }
        .into());
    }
    let expected = dim.unwrap_or(vectors[0].len());
    for v in &mut vectors {
        if v.len() != expected || expected == 0 {
            return Err(CoreError::DimensionMismatch {
                expected,
                actual: v.len(),
            }
            .into());
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite(i).into());
        }
        if v.iter().all(|x| *x == 0.0) {
            return Err(CoreError::InvalidDistribution("zero embedding vector".into()).into());
        }
        normalize(v);
    }
    Ok(vectors)
}

/// Embeds texts in chunks, checking the dimension stays constant across
/// chunks.
pub fn embed_all(providers: &Providers, texts: &[String], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    for batch in texts.chunks(chunk.max(1)) {
        let dim = out.first().map(Vec::len);
        out.extend(embed_batch(providers, batch, dim)?);
    }
    Ok(out)
}
