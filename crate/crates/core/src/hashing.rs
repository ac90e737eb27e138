//! Universal hashing for integer feature values.
//!
//! A family member is `h(x) = ((a·x + b) mod p) mod m` with a prime `p > m`.
//! Families are generated from a 64-bit seed with SplitMix64 so that they can
//! be regenerated bit-exactly in any language instead of being stored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of primes above `m` that a family draws its moduli from.
pub const PRIME_POOL_SIZE: usize = 64;

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a digest, used to map string feature values to integers.
pub fn hash_string(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &byte in bytes {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A categorical feature value: a non-negative integer ID.
///
/// String values enter through [`FeatureValue::from_key`], which applies
/// [`hash_string`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureValue(pub u64);

impl FeatureValue {
    pub fn from_key(key: &str) -> Self {
        FeatureValue(hash_string(key.as_bytes()))
    }

    pub fn id(self) -> u64 {
        self.0
    }
}

impl From<u64> for FeatureValue {
    fn from(id: u64) -> Self {
        FeatureValue(id)
    }
}

/// SplitMix64 counter-based generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..bound` by modulo reduction; the bias is below
    /// `bound / 2^64` and irrelevant for the moduli used here.
    pub fn below(&mut self, bound: u64) -> u64 {
        self.next_u64() % bound
    }
}

fn mul_mod(a: u64, b: u64, m: u64) -> u64 {
    ((a as u128 * b as u128) % m as u128) as u64
}

fn pow_mod(mut base: u64, mut exp: u64, m: u64) -> u64 {
    let mut acc = 1u64 % m;
    base %= m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = mul_mod(acc, base, m);
        }
        base = mul_mod(base, base, m);
        exp >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for every `u64`.
pub fn is_prime(n: u64) -> bool {
    const WITNESSES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    if n < 2 {
        return false;
    }
    for &w in &WITNESSES {
        if n.is_multiple_of(w) {
            return n == w;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'witness: for &w in &WITNESSES {
        let mut x = pow_mod(w, d, n);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, n);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// The first `count` primes strictly greater than `m`.
pub fn primes_above(m: u64, count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut candidate = m;
    while out.len() < count {
        candidate = candidate
            .checked_add(1)
            .expect("prime search overflowed u64");
        if is_prime(candidate) {
            out.push(candidate);
        }
    }
    out
}

/// Parameters of one universal hash function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UniversalHashParams {
    a: u64,
    b: u64,
    p: u64,
    m: u64,
}

impl UniversalHashParams {
    pub fn new(a: u64, b: u64, p: u64, m: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("bucket count m must be positive"));
        }
        if p <= m || !is_prime(p) {
            return Err(Error::config(format!(
                "modulus p={p} must be a prime > m={m}"
            )));
        }
        if a.is_multiple_of(p) {
            return Err(Error::config("multiplier a must be nonzero mod p"));
        }
        if b == 0 {
            return Err(Error::config("offset b must be nonzero"));
        }
        Ok(UniversalHashParams { a, b, p, m })
    }

    pub fn a(&self) -> u64 {
        self.a
    }
    pub fn b(&self) -> u64 {
        self.b
    }
    pub fn p(&self) -> u64 {
        self.p
    }
    pub fn m(&self) -> u64 {
        self.m
    }

    /// Bucket in `0..m`.
    ///
    /// `x` is reduced mod `p` first; the result equals `((a·x + b) mod p) mod m`
    /// and stays in `u64` arithmetic whenever `p < 2^32`.
    #[inline]
    pub fn hash(&self, x: u64) -> u64 {
        let p = self.p;
        if p < (1 << 32) {
            let xr = x % p;
            let ar = self.a % p;
            let br = self.b % p;
            ((ar * xr + br) % p) % self.m
        } else {
            let v = (self.a as u128 * x as u128 + self.b as u128) % p as u128;
            (v % self.m as u128) as u64
        }
    }
}

/// `((a·x + b) mod p) mod m`.
pub fn hash_int(params: &UniversalHashParams, x: u64) -> u64 {
    params.hash(x)
}

/// `k` universal hash functions sharing the bucket count `m`, fully
/// determined by `seed`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashFamily {
    seed: u64,
    m: u64,
    params: Vec<UniversalHashParams>,
}

impl HashFamily {
    /// Draws `k` distinct triples. For each function the generator yields, in
    /// order: the prime index into the pool of the first 64 primes above `m`,
    /// then `a` in `1..p`, then `b` in `1..p`. Duplicate triples are redrawn.
    pub fn new(seed: u64, k: usize, m: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("hash count k must be at least 1"));
        }
        if m < 2 {
            return Err(Error::config("bucket count m must be at least 2"));
        }
        let primes = primes_above(m, PRIME_POOL_SIZE);
        let mut rng = SplitMix64::new(seed);
        let mut seen = HashSet::with_capacity(k);
        let mut params = Vec::with_capacity(k);
        while params.len() < k {
            let p = primes[rng.below(PRIME_POOL_SIZE as u64) as usize];
            let a = 1 + rng.below(p - 1);
            let b = 1 + rng.below(p - 1);
            if seen.insert((a, b, p)) {
                params.push(UniversalHashParams { a, b, p, m });
            }
        }
        Ok(HashFamily { seed, m, params })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn k(&self) -> usize {
        self.params.len()
    }

    pub fn m(&self) -> u64 {
        self.m
    }

    pub fn params(&self) -> &[UniversalHashParams] {
        &self.params
    }

    /// Bucket indices of `x` under every function, in family order.
    pub fn buckets(&self, x: u64) -> Vec<u64> {
        self.params.iter().map(|h| h.hash(x)).collect()
    }

    pub fn buckets_into(&self, x: u64, out: &mut [u64]) {
        for (slot, h) in out.iter_mut().zip(&self.params) {
            *slot = h.hash(x);
        }
    }
}

/// Seeded family generation; see [`HashFamily::new`].
pub fn make_hash_family(seed: u64, k: usize, m: u64) -> Result<HashFamily> {
    HashFamily::new(seed, k, m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic_example() {
        let h = UniversalHashParams::new(3, 7, 11, 5).unwrap();
        // ((3*4 + 7) mod 11) mod 5 = (19 mod 11) mod 5 = 8 mod 5 = 3
        assert_eq!(hash_int(&h, 4), 3);
    }

    #[test]
    fn single_bucket_is_always_zero() {
        let h = UniversalHashParams::new(1, 1, 2, 1).unwrap();
        for x in [0, 1, 2, 99, u64::MAX] {
            assert_eq!(h.hash(x), 0);
        }
    }

    #[test]
    fn wide_path_matches_narrow_path() {
        let p = 4_294_967_311; // smallest prime above 2^32
        assert!(is_prime(p));
        let wide = UniversalHashParams::new(123_456_789, 987, p, 1000).unwrap();
        for x in [0u64, 1, 77, 1 << 40, u64::MAX] {
            let expect = ((123_456_789u128 * x as u128 + 987) % p as u128 % 1000) as u64;
            assert_eq!(wide.hash(x), expect);
        }
        let narrow = UniversalHashParams::new(40_000, 12, 1_000_003, 1000).unwrap();
        for x in [0u64, 5, 1_000_003, u64::MAX] {
            let expect = ((40_000u128 * x as u128 + 12) % 1_000_003 % 1000) as u64;
            assert_eq!(narrow.hash(x), expect);
        }
    }

    #[test]
    fn rejects_invalid_params() {
        assert!(UniversalHashParams::new(0, 1, 11, 5).is_err());
        assert!(UniversalHashParams::new(22, 1, 11, 5).is_err());
        assert!(UniversalHashParams::new(1, 0, 11, 5).is_err());
        assert!(UniversalHashParams::new(1, 1, 12, 5).is_err());
        assert!(UniversalHashParams::new(1, 1, 5, 5).is_err());
        assert!(UniversalHashParams::new(1, 1, 5, 0).is_err());
    }

    #[test]
    fn family_config_errors() {
        assert!(make_hash_family(0, 0, 10).is_err());
        assert!(make_hash_family(0, 3, 1).is_err());
    }

    #[test]
    fn smallest_family() {
        let fam = make_hash_family(0, 1, 2).unwrap();
        let h = fam.params()[0];
        assert!(h.p() >= 3);
        for x in 0..1000 {
            assert!(h.hash(x) < 2);
        }
    }

    #[test]
    fn paper_scale_family() {
        let fam = make_hash_family(0, 1024, 1_000_000).unwrap();
        assert_eq!(fam.k(), 1024);
        let pool = primes_above(1_000_000, PRIME_POOL_SIZE);
        let mut distinct = HashSet::new();
        for h in fam.params() {
            assert!(h.p() > 1_000_000);
            assert!(pool.contains(&h.p()));
            assert!(h.a() % h.p() != 0 && h.b() != 0);
            assert!(distinct.insert((h.a(), h.b(), h.p())));
        }
    }

    #[test]
    fn family_is_seed_deterministic() {
        let a = make_hash_family(42, 64, 1000).unwrap();
        let b = make_hash_family(42, 64, 1000).unwrap();
        assert_eq!(a, b);
        let c = make_hash_family(43, 64, 1000).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn primes_above_small() {
        assert_eq!(primes_above(10, 4), vec![11, 13, 17, 19]);
        assert_eq!(primes_above(1, 3), vec![2, 3, 5]);
    }

    #[test]
    fn primality_against_sieve() {
        let limit = 20_000usize;
        let mut sieve = vec![true; limit];
        sieve[0] = false;
        sieve[1] = false;
        for i in 2..limit {
            if sieve[i] {
                let mut j = i * i;
                while j < limit {
                    sieve[j] = false;
                    j += i;
                }
            }
        }
        for (n, &prime) in sieve.iter().enumerate() {
            assert_eq!(is_prime(n as u64), prime, "n={n}");
        }
        assert!(is_prime(18_446_744_073_709_551_557)); // largest u64 prime
        assert!(!is_prime(3_215_031_751)); // strong pseudoprime to bases 2,3,5,7
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of the canonical splitmix64.c seeded with 0.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xe220_a839_7b1d_cdaf);
        assert_eq!(rng.next_u64(), 0x6e78_9e6a_a1b9_65f4);
        assert_eq!(rng.next_u64(), 0x06c4_5d18_8009_454f);
    }

    #[test]
    fn fnv_golden_values() {
        assert_eq!(hash_string(b""), 0xcbf2_9ce4_8422_2325);
        // Published FNV-1a 64 test vectors.
        assert_eq!(hash_string(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(hash_string(b"foobar"), 0x8594_4171_f739_67e8);
        assert_eq!(
            FeatureValue::from_key("a"),
            FeatureValue(0xaf63_dc4c_8601_ec8c)
        );
    }

    #[test]
    fn fnv_no_collisions_on_distinct_strings() {
        let mut seen = HashSet::with_capacity(100_000);
        for i in 0..100_000u32 {
            assert!(seen.insert(hash_string(format!("item-{i}").as_bytes())));
        }
    }

    #[test]
    fn max_input_does_not_overflow() {
        let fam = make_hash_family(7, 16, 1_000_000).unwrap();
        for h in fam.params() {
            assert!(h.hash(i64::MAX as u64) < 1_000_000);
            assert!(h.hash(u64::MAX) < 1_000_000);
        }
    }

    #[test]
    fn buckets_are_uniform_chi_square() {
        // IDs 0..10^5 at m=10^6, buckets pooled into 100 equal ranges so each
        // cell expects 1000 hits; chi-square with 99 dof, critical value at
        // alpha=0.01 is 134.64. At small m the prime is only a few times m
        // and `mod m` skews buckets by up to ceil(p/m):floor(p/m).
        let m = 1_000_000u64;
        let fam = make_hash_family(0, 8, m).unwrap();
        for h in fam.params() {
            let mut counts = vec![0f64; 100];
            for x in 0..100_000u64 {
                counts[(h.hash(x) * 100 / m) as usize] += 1.0;
            }
            let expected = 1000.0;
            let chi2: f64 = counts
                .iter()
                .map(|c| (c - expected).powi(2) / expected)
                .sum();
            assert!(chi2 < 134.64, "chi2={chi2} for {h:?}");
        }
    }

    #[test]
    fn pairwise_collision_rate_is_bounded() {
        // For fixed x != y over 10^4 random families the collision frequency
        // stays at or below 2/m within three standard errors.
        let m = 50u64;
        let trials = 10_000;
        for (x, y) in [(1u64, 2u64), (0, 1_000_000), (12_345, 54_321)] {
            let mut hits = 0;
            for t in 0..trials {
                let h = make_hash_family(t, 1, m).unwrap().params()[0];
                if h.hash(x) == h.hash(y) {
                    hits += 1;
                }
            }
            let rate = hits as f64 / trials as f64;
            let bound = 2.0 / m as f64;
            let se = (bound * (1.0 - bound) / trials as f64).sqrt();
            assert!(rate <= bound + 3.0 * se, "x={x} y={y} rate={rate}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_in_range(seed in any::<u64>(), m in 1u64..5_000_000, x in any::<u64>()) {
                let m = m.max(2);
                let fam = make_hash_family(seed, 2, m).unwrap();
                for h in fam.params() {
                    prop_assert!(h.hash(x) < m);
                }
            }
        }
    }

    #[test]
    fn range_fuzz_million_inputs() {
        let fam = make_hash_family(99, 4, 1_000_000).unwrap();
        let mut rng = SplitMix64::new(5);
        for _ in 0..1_000_000 {
            let x = rng.next_u64();
            for h in fam.params() {
                assert!(h.hash(x) < 1_000_000);
            }
        }
    }
}
