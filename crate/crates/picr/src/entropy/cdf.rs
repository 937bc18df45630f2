//! Quantized cumulative distribution tables.
//!
//! Each row covers the integer values whose modeled probability is at least
//! half an ulp of the 16-bit grid (2^-17); everything outside folds into a
//! trailing escape symbol coded with bypass bits. Rows are quantized to sum
//! exactly 2^16 by largest remainder, with every bin kept >= 1.

use super::factorized::FactorizedPrior;
use super::GaussianConditional;

/// All row CDFs sum to this (16-bit precision).
pub const CDF_TOTAL: u32 = 1 << 16;
/// Values below this modeled probability fold into the escape symbol.
const SUPPORT_THRESHOLD: f64 = 0.5 / CDF_TOTAL as f64; // 2^-17
/// Hard cap on the support scan.
const MAX_SUPPORT: i64 = 4096;

/// One coding context: integer values `min_value .. min_value + n - 1` plus a
/// trailing escape bin. `cdf` has `n + 2` entries, from 0 to `CDF_TOTAL`.
#[derive(Debug, Clone)]
pub struct CdfRow {
    pub min_value: i64,
    pub cdf: Vec<u32>,
}

impl CdfRow {
    /// Builds a row from raw probabilities of the covered values. The escape
    /// bin receives the leftover tail mass.
    pub fn from_pmf(min_value: i64, pmf: &[f64]) -> CdfRow {
        let covered: f64 = pmf.iter().sum();
        let escape = (1.0 - covered).max(0.0);
        let mut full = pmf.to_vec();
        full.push(escape);
        let freqs = quantize_pmf(&full, CDF_TOTAL);
        let mut cdf = Vec::with_capacity(full.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for f in freqs {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(*cdf.last().unwrap(), CDF_TOTAL);
        CdfRow { min_value, cdf }
    }

    /// Number of symbols including the escape.
    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn escape_symbol(&self) -> usize {
        self.symbols() - 1
    }

    /// Symbol index of an integer value, `None` when it must be escaped.
    pub fn symbol_of_value(&self, v: i64) -> Option<usize> {
        let idx = v - self.min_value;
        if idx >= 0 && (idx as usize) < self.escape_symbol() {
            Some(idx as usize)
        } else {
            None
        }
    }

    pub fn value_of_symbol(&self, sym: usize) -> i64 {
        debug_assert!(sym < self.escape_symbol());
        self.min_value + sym as i64
    }

    /// `(cumulative, frequency)` of a symbol.
    pub fn freq(&self, sym: usize) -> (u32, u32) {
        (self.cdf[sym], self.cdf[sym + 1] - self.cdf[sym])
    }

    /// Symbol whose interval contains the cumulative target.
    pub fn lookup(&self, cum: u32) -> usize {
        debug_assert!(cum < CDF_TOTAL);
        self.cdf.partition_point(|&c| c <= cum) - 1
    }
}

#[derive(Debug, Clone, Default)]
pub struct CdfTable {
    pub rows: Vec<CdfRow>,
}

/// Largest-remainder quantization of a pmf onto `total`, every bin >= 1.
fn quantize_pmf(pmf: &[f64], total: u32) -> Vec<u32> {
    let n = pmf.len();
    assert!(n as u32 <= total, "more bins than probability mass units");
    let sum: f64 = pmf.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let scaled: Vec<f64> = pmf.iter().map(|p| p.max(0.0) / sum * total as f64).collect();
    let mut freqs: Vec<u32> = scaled.iter().map(|&s| (s.floor() as u32).max(1)).collect();
    let mut acc: i64 = freqs.iter().map(|&f| f as i64).sum();
    // distribute the shortfall to the largest remainders (stable on ties)
    if acc < total as i64 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut i = 0;
        while acc < total as i64 {
            freqs[order[i % n]] += 1;
            acc += 1;
            i += 1;
        }
    }
    // pull the excess from the largest bins, never emptying one
    while acc > total as i64 {
        let (imax, _) = freqs
            .iter()
            .enumerate()
            .filter(|(_, &f)| f > 1)
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("cannot shrink pmf further");
        freqs[imax] -= 1;
        acc -= 1;
    }
    freqs
}

/// One row per scale-table entry; row support shrinks with the scale.
pub fn build_gaussian_tables(gauss: &GaussianConditional) -> CdfTable {
    let rows = gauss
        .scales
        .iter()
        .map(|&sigma| {
            let mut radius = 0i64;
            while radius < MAX_SUPPORT
                && gauss.bin_probability((radius + 1) as f64, sigma) >= SUPPORT_THRESHOLD
            {
                radius += 1;
            }
            let pmf: Vec<f64> = (-radius..=radius)
                .map(|v| gauss.bin_probability(v as f64, sigma))
                .collect();
            CdfRow::from_pmf(-radius, &pmf)
        })
        .collect();
    CdfTable { rows }
}

/// One row per hyper-latent channel.
pub fn build_factorized_tables(prior: &FactorizedPrior) -> CdfTable {
    let rows = (0..prior.channels)
        .map(|ch| {
            let mut lo = 0i64;
            while lo > -MAX_SUPPORT && prior.bin_probability(ch, (lo - 1) as f64) >= SUPPORT_THRESHOLD
            {
                lo -= 1;
            }
            let mut hi = 0i64;
            while hi < MAX_SUPPORT && prior.bin_probability(ch, (hi + 1) as f64) >= SUPPORT_THRESHOLD
            {
                hi += 1;
            }
            let pmf: Vec<f64> = (lo..=hi).map(|v| prior.bin_probability(ch, v as f64)).collect();
            CdfRow::from_pmf(lo, &pmf)
        })
        .collect();
    CdfTable { rows }
}
