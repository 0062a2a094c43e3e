//! Quantized cumulative frequency tables.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

/// Cumulative counts of an alphabet `0..n`; every symbol has count >= 1 and
/// the counts sum to [`TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::EmptyAlphabet);
        }
        let mut cum = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u64;
        cum.push(0);
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(Error::Probability(format!("symbol {i} has zero count")));
            }
            acc += c as u64;
            if acc > TOTAL as u64 {
                return Err(Error::Probability("counts exceed the table total".into()));
            }
            cum.push(acc as u32);
        }
        if acc != TOTAL as u64 {
            return Err(Error::Probability(format!("counts sum to {acc}, expected {TOTAL}")));
        }
        Ok(Self { cum })
    }

    /// Uniform table over `n` symbols (counts differ by at most one).
    pub fn uniform(n: usize) -> Result<Self> {
        build_cdf(&vec![1.0 / n.max(1) as f64; n])
    }

    /// Alphabet size.
    pub fn len(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn counts(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn prob(&self, s: usize) -> f64 {
        self.freq(s) as f64 / TOTAL as f64
    }

    /// Bits an ideal coder spends on `s`.
    pub fn cost(&self, s: usize) -> f64 {
        -self.prob(s).log2()
    }

    /// The symbol whose interval contains `target` (`target < TOTAL`).
    pub fn find(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }
}

/// Quantizes a pmf to 16-bit counts. Counts follow the largest-remainder rule
/// on `pmf / sum(pmf)`; bins that would round to zero get one count, taken
/// from the currently largest bin. An all-zero pmf gives a uniform table.
pub fn build_cdf(pmf: &[f64]) -> Result<CdfTable> {
    let n = pmf.len();
    if n == 0 {
        return Err(Error::EmptyAlphabet);
    }
    if n > (TOTAL / 2) as usize {
        return Err(Error::Probability(format!("alphabet of {n} symbols is too large")));
    }
    let mut sum = 0.0;
    for (i, &p) in pmf.iter().enumerate() {
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::Probability(format!("pmf[{i}] = {p}")));
        }
        sum += p;
    }
    if sum > 1.0 + 1e-6 {
        return Err(Error::Probability(format!("pmf sums to {sum}")));
    }
    let weights: Vec<f64> = if sum > 0.0 {
        pmf.iter().map(|p| p / sum).collect()
    } else {
        vec![1.0 / n as f64; n]
    };

    let raw: Vec<f64> = weights.iter().map(|w| w * TOTAL as f64).collect();
    let mut counts: Vec<u32> = raw.iter().map(|r| r.floor() as u32).collect();
    let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
    let remainder = (TOTAL as u64).saturating_sub(assigned) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(remainder) {
        counts[i] += 1;
    }
    for i in 0..n {
        if counts[i] == 0 {
            let max = argmax(&counts);
            counts[max] -= 1;
            counts[i] = 1;
        }
    }
    CdfTable::from_counts(&counts)
}

fn argmax(counts: &[u32]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_four() {
        let t = build_cdf(&[0.25; 4]).unwrap();
        assert_eq!(t.counts(), vec![16384; 4]);
    }

    #[test]
    fn tiny_bin_gets_one_count_from_the_largest() {
        let t = build_cdf(&[1e-12, 0.3, 0.7 - 1e-12]).unwrap();
        let c = t.counts();
        assert_eq!(c[0], 1);
        let exact = build_cdf(&[0.0, 0.3, 0.7]).unwrap().counts();
        assert_eq!(c[1], exact[1]);
        assert_eq!(c[2], exact[2]);
    }

    #[test]
    fn rebuild_is_identical() {
        let pmf: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 3000.0).collect();
        assert_eq!(build_cdf(&pmf).unwrap(), build_cdf(&pmf).unwrap());
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(build_cdf(&[]), Err(Error::EmptyAlphabet)));
        assert!(build_cdf(&[0.5, -0.1]).is_err());
        assert!(build_cdf(&[0.9, 0.9]).is_err());
        assert!(build_cdf(&[f64::NAN]).is_err());
        assert!(CdfTable::from_counts(&[TOTAL - 1, 0, 1]).is_err());
    }

    #[test]
    fn find_inverts_cumulative_counts() {
        let t = build_cdf(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for s in 0..4 {
            assert_eq!(t.find(t.cum(s)), s);
            assert_eq!(t.find(t.cum(s) + t.freq(s) - 1), s);
        }
    }

    #[test]
    fn all_zero_pmf_is_uniform() {
        assert_eq!(build_cdf(&[0.0; 4]).unwrap().counts(), vec![16384; 4]);
    }
}
