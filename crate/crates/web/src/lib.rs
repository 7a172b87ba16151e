//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every exported function is a thin wrapper over a plain Rust function of
//! the same name with a `_impl` suffix, so the logic is testable natively.

use rand::Rng;
use wasm_bindgen::prelude::*;

use fantrans::synth::{self, SynthSpec, CHANNELS};
use fantrans::transformer::{apply_attention_drop, keep_count};
use fantrans::{rng, DropMode, Graph, Tensor};

const MAX_AU: usize = 16;

fn js(e: fantrans::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn check_n(n: usize) -> fantrans::Result<()> {
    if n == 0 || n > MAX_AU {
        return Err(fantrans::Error::Usage(format!("number of AUs must lie in 1..={MAX_AU}, got {n}")));
    }
    Ok(())
}

/// One attention map before and after the drop rule, row-major `N × N`.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct AttentionView {
    n: usize,
    pre: Vec<f64>,
    post: Vec<f64>,
    mask: Vec<f64>,
    keep: usize,
}

#[wasm_bindgen]
impl AttentionView {
    #[wasm_bindgen(getter)]
    pub fn n(&self) -> usize {
        self.n
    }

    #[wasm_bindgen(getter)]
    pub fn pre(&self) -> Vec<f64> {
        self.pre.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn post(&self) -> Vec<f64> {
        self.post.clone()
    }

    /// Binary column mask of the learnable rule; all ones otherwise.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<f64> {
        self.mask.clone()
    }

    /// Entries kept per row or column by the row and column rules.
    #[wasm_bindgen(getter)]
    pub fn keep(&self) -> usize {
        self.keep
    }
}

/// Softmax attention over random scores, then the chosen drop rule.
/// `sharpness` scales the scores; `mask_logits` (length `n`) drive the
/// learnable rule and are ignored by the others.
pub fn attention_drop_impl(
    n: usize,
    mode: &str,
    seed: u64,
    sharpness: f64,
    mask_logits: &[f64],
) -> fantrans::Result<AttentionView> {
    check_n(n)?;
    let mode: DropMode = mode.parse()?;
    let mut r = rng::stream(seed, "demo-attention");
    let scores = Tensor::from_fn(&[n, n], |_| sharpness * r.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let s = g.constant(scores);
    let a = g.softmax(s, 1)?;
    let logits = if mode == DropMode::Learnable {
        if mask_logits.len() != n {
            return Err(fantrans::Error::Usage(format!("need {n} mask logits, got {}", mask_logits.len())));
        }
        Some(g.constant(Tensor::new(&[n], mask_logits.to_vec())?))
    } else {
        None
    };
    let post = apply_attention_drop(&mut g, a, mode, logits)?;
    let mask = match logits {
        Some(l) => {
            let m = g.ste_binarize(l)?;
            g.value(m).data().to_vec()
        }
        None => vec![1.0; n],
    };
    Ok(AttentionView {
        n,
        pre: g.value(a).data().to_vec(),
        post: g.value(post).data().to_vec(),
        mask,
        keep: keep_count(n),
    })
}

#[wasm_bindgen]
pub fn attention_drop(n: usize, mode: &str, seed: u32, sharpness: f64, mask_logits: Vec<f64>) -> Result<AttentionView, JsError> {
    attention_drop_impl(n, mode, seed.into(), sharpness, &mask_logits).map_err(js)
}

/// Result of the one-to-many aggregation on one vote matrix.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct TopKView {
    scores: Vec<f64>,
    selected: Vec<u8>,
}

#[wasm_bindgen]
impl TopKView {
    /// Per-AU logit: the sum of the `k` largest votes in its column.
    #[wasm_bindgen(getter)]
    pub fn scores(&self) -> Vec<f64> {
        self.scores.clone()
    }

    /// Row-major `N × N`; 1 where a vote was counted.
    #[wasm_bindgen(getter)]
    pub fn selected(&self) -> Vec<u8> {
        self.selected.clone()
    }
}

/// Column-wise top-`k` sums of an `N × N` vote matrix (row `i` holds the
/// votes of AU token `i`). The counted votes are read off the gradient of
/// the summed scores, which is 1 exactly on the selection.
pub fn topk_votes_impl(votes: &[f64], n: usize, k: usize) -> fantrans::Result<TopKView> {
    check_n(n)?;
    let mut g = Graph::new();
    let v = g.input(Tensor::new(&[1, n, n], votes.to_vec())?);
    let p = g.topk_sum(v, k, 1)?;
    let total = g.sum(p)?;
    let grads = g.backward(total)?;
    let sel = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n * n]);
    Ok(TopKView {
        scores: g.value(p).data().to_vec(),
        selected: sel.iter().map(|&x| u8::from(x != 0.0)).collect(),
    })
}

#[wasm_bindgen]
pub fn topk_votes(votes: Vec<f64>, n: usize, k: usize) -> Result<TopKView, JsError> {
    topk_votes_impl(&votes, n, k).map_err(js)
}

/// Random votes in `[-1, 1]` rounded to two decimals, for the page's
/// "shuffle" button.
#[wasm_bindgen]
pub fn random_votes(n: usize, seed: u32) -> Vec<f64> {
    let mut r = rng::stream(seed.into(), "demo-votes");
    (0..n * n).map(|_| (r.random_range(-1.0..1.0f64) * 100.0).round() / 100.0).collect()
}

/// One rendered synthetic face.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct SampleView {
    size: usize,
    rgba: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl SampleView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// `size × size × 4` bytes for an `ImageData`.
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

/// Spec used by the viewer: the default layout for eight AUs, otherwise
/// consecutive pairs firing together.
pub fn demo_spec(n_au: usize, image_size: usize, seed: u64, noise_rate: f64) -> SynthSpec {
    let base = SynthSpec::default();
    let (groups, base_rates) = if n_au == base.n_au {
        (base.groups, base.base_rates)
    } else {
        let groups: Vec<Vec<usize>> = (0..n_au).collect::<Vec<_>>().chunks(2).map(<[usize]>::to_vec).collect();
        let rates = vec![0.4; groups.len()];
        (groups, rates)
    };
    SynthSpec {
        n_au,
        n_samples: 1,
        seed,
        groups,
        base_rates,
        noise_rate,
        image_size,
    }
}

pub fn synth_sample_impl(
    n_au: usize,
    image_size: usize,
    seed: u64,
    index: usize,
    noise_rate: f64,
) -> fantrans::Result<SampleView> {
    check_n(n_au)?;
    let spec = demo_spec(n_au, image_size, seed, noise_rate);
    spec.validate()?;
    let s = synth::generate_sample(&spec, index);
    let px = image_size * image_size;
    let mut rgba = Vec::with_capacity(px * 4);
    for p in 0..px {
        for c in 0..CHANNELS {
            rgba.push((s.image.data()[c * px + p] * 255.0).round() as u8);
        }
        rgba.push(255);
    }
    Ok(SampleView {
        size: image_size,
        rgba,
        labels: s.labels.iter().map(|&b| u8::from(b)).collect(),
    })
}

#[wasm_bindgen]
pub fn synth_sample(n_au: usize, image_size: usize, seed: u32, index: usize, noise_rate: f64) -> Result<SampleView, JsError> {
    synth_sample_impl(n_au, image_size, seed.into(), index, noise_rate).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_drop_keeps_half_of_each_row() {
        let v = attention_drop_impl(6, "row", 3, 2.0, &[]).unwrap();
        for row in v.post.chunks(6) {
            assert_eq!(row.iter().filter(|&&x| x > 0.0).count(), 3);
        }
        for row in v.pre.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learnable_mask_zeroes_columns() {
        let logits = [1.0, -1.0, 1.0, -1.0];
        let v = attention_drop_impl(4, "learnable", 0, 1.0, &logits).unwrap();
        assert_eq!(v.mask, vec![1.0, 0.0, 1.0, 0.0]);
        for (i, (&post, &pre)) in v.post.iter().zip(&v.pre).enumerate() {
            assert_eq!(post, v.mask[i % 4] * pre);
        }
        assert!(attention_drop_impl(4, "learnable", 0, 1.0, &[1.0]).is_err());
        assert!(attention_drop_impl(4, "sideways", 0, 1.0, &[]).is_err());
    }

    #[test]
    fn topk_selection_matches_scores() {
        // Column 0 votes are 0.2, 0.5, 0.1.
        let votes = [0.2, 0.0, 0.0, 0.5, 0.0, 0.0, 0.1, 0.0, 0.0];
        let t = topk_votes_impl(&votes, 3, 2).unwrap();
        assert_eq!(t.scores[0], 0.5 + 0.2);
        assert_eq!(t.selected.iter().step_by(3).copied().collect::<Vec<_>>(), vec![1, 1, 0]);
        let col_counts: Vec<u8> = (0..3).map(|j| (0..3).map(|i| t.selected[i * 3 + j]).sum()).collect();
        assert_eq!(col_counts, vec![2, 2, 2]);
        assert!(topk_votes_impl(&votes, 3, 4).is_err());
    }

    #[test]
    fn sample_pixels_and_labels() {
        let s = synth_sample_impl(8, 32, 1, 4, 0.05).unwrap();
        assert_eq!(s.rgba.len(), 32 * 32 * 4);
        assert!(s.rgba.chunks(4).all(|p| p[3] == 255));
        assert_eq!(s.labels.len(), 8);
        assert_eq!(demo_spec(5, 32, 0, 0.0).groups, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(synth_sample_impl(0, 32, 1, 0, 0.0).is_err());
        assert!(synth_sample_impl(4, 4, 1, 0, 0.0).is_err());
    }

    #[test]
    fn random_votes_are_reproducible() {
        assert_eq!(random_votes(4, 9), random_votes(4, 9));
        assert_ne!(random_votes(4, 9), random_votes(4, 10));
    }
}
