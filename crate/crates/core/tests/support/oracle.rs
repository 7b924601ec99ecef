//! Brute-force reference implementations used to check the library.
//!
//! Nothing here calls the metric or gradient code under test; the model
//! oracle reads raw parameters and recomputes everything with plain loops.
#![allow(dead_code, clippy::needless_range_loop)]

use qms_core::model::{LanguageModel, TokenId, BOS};
use qms_core::ReferenceLm;

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let chars: Vec<char> = raw.chars().collect();
        let mut lo = 0;
        let mut hi = chars.len();
        while lo < hi && !chars[lo].is_alphanumeric() {
            lo += 1;
        }
        while hi > lo && !chars[hi - 1].is_alphanumeric() {
            hi -= 1;
        }
        if lo < hi {
            out.push(chars[lo..hi].iter().collect::<String>().to_lowercase());
        }
    }
    out
}

pub fn accuracy(candidate: &str, reference: &str) -> f64 {
    let c = words(candidate);
    let r = words(reference);
    let longest = if c.len() > r.len() { c.len() } else { r.len() };
    if longest == 0 {
        return 1.0;
    }
    let mut hits = 0;
    for i in 0..longest {
        if i < c.len() && i < r.len() && c[i] == r[i] {
            hits += 1;
        }
    }
    hits as f64 / longest as f64
}

/// Clipped overlap by greedy one-to-one matching of n-gram occurrences.
pub fn rouge(candidate: &str, reference: &str, n: usize) -> (f64, f64, f64) {
    let c = words(candidate);
    let r = words(reference);
    if c == r {
        return (1.0, 1.0, 1.0);
    }
    let grams = |w: &[String]| -> Vec<Vec<String>> {
        if w.len() < n {
            return Vec::new();
        }
        (0..=w.len() - n).map(|i| w[i..i + n].to_vec()).collect()
    };
    let cg = grams(&c);
    let rg = grams(&r);
    if cg.is_empty() || rg.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut used = vec![false; rg.len()];
    let mut overlap = 0usize;
    for g in &cg {
        for (j, h) in rg.iter().enumerate() {
            if !used[j] && g == h {
                used[j] = true;
                overlap += 1;
                break;
            }
        }
    }
    let p = overlap as f64 / cg.len() as f64;
    let rc = overlap as f64 / rg.len() as f64;
    let f = if overlap == 0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

/// Explicit-loop forward pass of a log-bilinear model.
pub struct ModelOracle<'a> {
    pub model: &'a ReferenceLm,
}

impl ModelOracle<'_> {
    fn dim(&self) -> usize {
        self.model.embedding_dim()
    }

    pub fn table_row(&self, id: TokenId) -> Vec<f64> {
        self.model.embeddings().unwrap().row(id as usize).to_vec()
    }

    /// Logits given the context rows, oldest first (exactly `k` rows).
    pub fn logits_from_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let d = self.dim();
        let mut h = vec![0.0; d];
        for (slot, row) in rows.iter().enumerate() {
            let c = &self.model.context_matrices()[slot];
            for a in 0..d {
                for b in 0..d {
                    h[a] += c.as_slice()[a * d + b] * row[b];
                }
            }
        }
        let v = self.model.vocabulary().len();
        (0..v)
            .map(|w| {
                let e = self.table_row(w as TokenId);
                let mut s = self.model.bias()[w];
                for a in 0..d {
                    s += h[a] * e[a];
                }
                s
            })
            .collect()
    }

    /// Probabilities by direct exponentiation (max-shifted).
    pub fn probs(&self, logits: &[f64]) -> Vec<f64> {
        let mut max = f64::NEG_INFINITY;
        for &l in logits {
            if l > max {
                max = l;
            }
        }
        let ex: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = ex.iter().sum();
        ex.iter().map(|e| e / z).collect()
    }

    /// Rows of the padded sequence `<s>^k ++ prompt_rows ++ E[target]`.
    fn sequence(&self, prompt_rows: &[Vec<f64>], target: &[TokenId]) -> Vec<Vec<f64>> {
        let k = self.model.context_len();
        let mut seq = vec![self.table_row(BOS); k];
        seq.extend(prompt_rows.iter().cloned());
        seq.extend(target.iter().map(|&t| self.table_row(t)));
        seq
    }

    /// `Σ_t −ln p(target_t | prompt, target_<t)`.
    pub fn loss(&self, prompt_rows: &[Vec<f64>], target: &[TokenId]) -> f64 {
        let k = self.model.context_len();
        let seq = self.sequence(prompt_rows, target);
        let mut total = 0.0;
        for (t, &y) in target.iter().enumerate() {
            let p = k + prompt_rows.len() + t;
            let probs = self.probs(&self.logits_from_rows(&seq[p - k..p]));
            total -= probs[y as usize].ln();
        }
        total
    }

    pub fn loss_for_tokens(&self, prompt: &[TokenId], target: &[TokenId]) -> f64 {
        let rows: Vec<Vec<f64>> = prompt.iter().map(|&t| self.table_row(t)).collect();
        self.loss(&rows, target)
    }

    /// Central finite differences of [`loss`](Self::loss) for every prompt
    /// embedding entry.
    pub fn numeric_gradient(&self, prompt_rows: &[Vec<f64>], target: &[TokenId], h: f64) -> Vec<Vec<f64>> {
        let mut grad = vec![vec![0.0; self.dim()]; prompt_rows.len()];
        for i in 0..prompt_rows.len() {
            for j in 0..self.dim() {
                let mut plus = prompt_rows.to_vec();
                plus[i][j] += h;
                let mut minus = prompt_rows.to_vec();
                minus[i][j] -= h;
                grad[i][j] = (self.loss(&plus, target) - self.loss(&minus, target)) / (2.0 * h);
            }
        }
        grad
    }

    /// Perplexity of `ids[1..]` given preceding ids: `Π p^(−1/N)`.
    pub fn perplexity(&self, ids: &[TokenId]) -> f64 {
        let k = self.model.context_len();
        let mut padded = vec![BOS; k];
        padded.extend_from_slice(ids);
        let mut prod = 1.0;
        let n = ids.len() - 1;
        for i in 1..ids.len() {
            let p = k + i;
            let rows: Vec<Vec<f64>> = padded[p - k..p].iter().map(|&t| self.table_row(t)).collect();
            prod *= self.probs(&self.logits_from_rows(&rows))[ids[i] as usize];
        }
        prod.powf(-1.0 / n as f64)
    }

    /// Greedy decoding (first maximum wins, `<s>` excluded), stopping after
    /// `</s>`.
    pub fn greedy(&self, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
        let k = self.model.context_len();
        let mut padded = vec![BOS; k];
        padded.extend_from_slice(prompt);
        let mut out = Vec::new();
        for _ in 0..max_new {
            let p = padded.len();
            let rows: Vec<Vec<f64>> = padded[p - k..p].iter().map(|&t| self.table_row(t)).collect();
            let logits = self.logits_from_rows(&rows);
            let mut best = 1usize;
            for w in 1..logits.len() {
                if logits[w] > logits[best] {
                    best = w;
                }
            }
            out.push(best as TokenId);
            padded.push(best as TokenId);
            if best == 1 {
                break;
            }
        }
        out
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
