//! Brute-force contrastive loss oracle.
//!
//! A literal loop transcription of the grouped contrastive loss with no
//! vectorization and no numerical stabilization beyond 64-bit arithmetic.
//! It exists to cross-check the graph implementations and is kept free of
//! any code shared with them. Intended for small batches (2N <= 64).

use super::PositiveCountConvention;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Grouped contrastive loss, batch sum reduction.
///
/// `rows` holds the 2N embedding rows, `ids` the group id per row. Anchors
/// without positives contribute nothing here; callers that consider that a
/// contract violation must check before calling.
pub fn grouped_contrastive(
    rows: &[&[f64]],
    ids: &[i64],
    temperature: f64,
    convention: PositiveCountConvention,
) -> f64 {
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&j| j != i && ids[j] == ids[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let instances = positives.len() + 1;
        let divisor = match convention {
            // positives per anchor: both augmentations of every original in
            // the group except the anchor itself
            PositiveCountConvention::Originals => positives.len() as f64,
            // id count taken over augmented instances instead
            PositiveCountConvention::Augmented => (2 * instances - 1) as f64,
        };

        let mut denom = 0.0;
        for k in 0..n {
            if k != i {
                denom += (dot(rows[i], rows[k]) / temperature).exp();
            }
        }
        let mut inner = 0.0;
        for &j in &positives {
            inner += ((dot(rows[i], rows[j]) / temperature).exp() / denom).ln();
        }
        total += -inner / divisor;
    }
    total
}

/// Mean negative log-softmax of the true class, by direct summation.
pub fn cross_entropy(logits: &[&[f64]], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[label].exp() / denom).ln();
    }
    total / logits.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    // one sample, two augmentations: the only candidate is the positive,
    // so every log term is log(1) and the loss is exactly zero
    #[test]
    fn two_row_batch_is_zero() {
        let rows: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.6, 0.8]];
        let loss = grouped_contrastive(&rows, &[5, 5], 0.1, PositiveCountConvention::Originals);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn collapsed_embeddings_hit_closed_form() {
        // identical unit rows: every similarity is 1, every softmax entry is
        // 1/(2N-1), so the sum-reduced loss is 2N * ln(2N - 1)
        let row = [1.0, 0.0, 0.0];
        let rows: Vec<&[f64]> = (0..6).map(|_| &row[..]).collect();
        let ids = [0, 0, 1, 1, 2, 2];
        let loss = grouped_contrastive(&rows, &ids, 0.5, PositiveCountConvention::Originals);
        let expect = 6.0 * 5.0f64.ln();
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let rows: Vec<&[f64]> = vec![&[0.0, 0.0, 0.0, 0.0]];
        let ce = cross_entropy(&rows, &[2]);
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }
}
