//! Quantized Gaussian CDF tables over the clipped symbol alphabet.
//!
//! A table carries cumulative 16-bit masses for symbols in
//! `[-clip, clip]`, with the Gaussian tails folded into the extreme bins.
//! Every bin keeps mass ≥ 1 so the coder never sees a zero-width interval;
//! the rounding surplus or deficit is settled against the largest bin.

/// Total CDF mass (16-bit precision).
pub const CDF_TOTAL: u32 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    clip: i32,
    /// cumulative bounds, length `2*clip + 2`; `cdf[0] = 0`, last = `CDF_TOTAL`
    cdf: Vec<u32>,
}

impl CdfTable {
    pub fn clip(&self) -> i32 {
        self.clip
    }

    pub fn n_symbols(&self) -> usize {
        2 * self.clip as usize + 1
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    fn index(&self, sym: i32) -> usize {
        debug_assert!(sym.abs() <= self.clip, "symbol {sym} outside ±{}", self.clip);
        (sym + self.clip) as usize
    }

    /// Cumulative interval `(start, size)` of a symbol.
    pub fn interval(&self, sym: i32) -> (u32, u32) {
        let i = self.index(sym);
        (self.cdf[i], self.cdf[i + 1] - self.cdf[i])
    }

    pub fn mass(&self, sym: i32) -> u32 {
        self.interval(sym).1
    }

    /// Symbol whose interval contains the cumulative `value`.
    pub fn lookup(&self, value: u32) -> i32 {
        debug_assert!(value < CDF_TOTAL);
        // first bound strictly above value, minus one, is the owning bin
        let idx = self.cdf.partition_point(|&b| b <= value) - 1;
        idx as i32 - self.clip
    }

    /// −log₂(mass / total) of a symbol under this table.
    pub fn self_info_bits(&self, sym: i32) -> f64 {
        -((self.mass(sym) as f64) / (CDF_TOTAL as f64)).log2()
    }
}

fn std_phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Quantized CDF for a Gaussian N(μ, σ²) over symbols `[-clip, clip]`.
/// Deterministic for identical (μ, σ) bit patterns.
pub fn build_cdf(mu: f32, sigma: f32, clip: i32) -> CdfTable {
    debug_assert!(sigma > 0.0);
    let n = 2 * clip as usize + 1;
    let mu = f64::from(mu);
    let sigma = f64::from(sigma);

    // upper cumulative bound per symbol, tails folded into the extremes
    let upper = |s: i32| -> f64 {
        if s >= clip {
            1.0
        } else {
            std_phi((s as f64 + 0.5 - mu) / sigma)
        }
    };

    let mut mass: Vec<u32> = Vec::with_capacity(n);
    let mut prev = 0.0f64; // U(-clip - 1)
    for s in -clip..=clip {
        let u = upper(s);
        let raw = ((u - prev) * CDF_TOTAL as f64).round() as u32;
        mass.push(raw.max(1));
        prev = u;
    }

    let mut sum: u64 = mass.iter().map(|&m| m as u64).sum();
    // settle the rounding surplus/deficit against the largest bin
    while sum > CDF_TOTAL as u64 {
        let excess = sum - CDF_TOTAL as u64;
        let i = argmax_first(&mass);
        let take = excess.min((mass[i] - 1) as u64) as u32;
        mass[i] -= take;
        sum -= take as u64;
    }
    if sum < CDF_TOTAL as u64 {
        let i = argmax_first(&mass);
        mass[i] += (CDF_TOTAL as u64 - sum) as u32;
    }

    let mut cdf = Vec::with_capacity(n + 1);
    let mut acc = 0u32;
    cdf.push(0);
    for &m in &mass {
        acc += m;
        cdf.push(acc);
    }
    debug_assert_eq!(*cdf.last().unwrap(), CDF_TOTAL);
    CdfTable { clip, cdf }
}

fn argmax_first(v: &[u32]) -> usize {
    let mut best = 0usize;
    for (i, &m) in v.iter().enumerate() {
        if m > v[best] {
            best = i;
        }
    }
    best
}
