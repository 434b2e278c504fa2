//! Two-stage multi-modal mask sampling.
//!
//! Stage one draws the proportion of visible tokens per modality from a
//! symmetric Dirichlet Dir(alpha); stage two picks each modality's token
//! indices uniformly at random without replacement. `alpha = equal` denotes
//! the limit where every modality always gets the same share.
//!
//! Proportions become integer counts by largest-remainder (Hamilton)
//! apportionment with ties broken towards the lower modality index; counts
//! that would exceed a modality's capacity spill to the modality with the
//! next-largest remainder.

use std::fmt;

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("invalid dirichlet parameters: {0}")]
    Config(String),
    #[error("cannot place {requested} visible tokens into capacity {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("bad mask plan text: {0}")]
    Parse(String),
}

/// Dirichlet concentration, with the equal-shares limit as its own value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Alpha {
    Concentration(f64),
    /// Always split visible tokens equally across modalities.
    Equal,
}

impl Alpha {
    pub fn parse(s: &str) -> Result<Alpha, MaskError> {
        if s.eq_ignore_ascii_case("equal") {
            return Ok(Alpha::Equal);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| MaskError::Config(format!("alpha `{s}` is neither a number nor `equal`")))?;
        if v > 0.0 {
            Ok(Alpha::Concentration(v))
        } else {
            Err(MaskError::Config(format!("alpha must be positive, got {v}")))
        }
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Concentration(a) => write!(f, "{a}"),
            Alpha::Equal => write!(f, "equal"),
        }
    }
}

/// Parameters of the visible-token sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletParams {
    pub alpha: Alpha,
    pub num_modalities: usize,
    pub num_visible: usize,
}

impl DirichletParams {
    pub fn new(alpha: Alpha, num_modalities: usize, num_visible: usize) -> Result<Self, MaskError> {
        if num_modalities == 0 {
            return Err(MaskError::Config("need at least one modality".into()));
        }
        if let Alpha::Concentration(a) = alpha {
            if !(a > 0.0) {
                return Err(MaskError::Config(format!("alpha must be positive, got {a}")));
            }
        }
        Ok(DirichletParams {
            alpha,
            num_modalities,
            num_visible,
        })
    }
}

/// Per-modality visible-token index sets; fully determines what the encoder
/// sees for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Visible count per modality; sums to `num_visible`.
    pub counts: Vec<usize>,
    /// Sorted visible indices into each modality's `grid^2` tokens.
    pub visible: Vec<Vec<usize>>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn num_visible(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Plan with every token of every modality visible.
    pub fn all_visible(num_modalities: usize, cap: usize) -> MaskPlan {
        MaskPlan {
            counts: vec![cap; num_modalities],
            visible: vec![(0..cap).collect(); num_modalities],
            seed: 0,
        }
    }

    /// Fraction of visible tokens held by the best-represented modality.
    pub fn max_share(&self) -> f64 {
        let total = self.num_visible().max(1);
        *self.counts.iter().max().unwrap_or(&0) as f64 / total as f64
    }

    /// Text form used by the reconstruction command's reproducibility flag:
    /// `seed=<n>` then one `modality_index:i,j,k` line per modality.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed={}\n", self.seed);
        for (m, indices) in self.visible.iter().enumerate() {
            let list: Vec<String> = indices.iter().map(|i| i.to_string()).collect();
            out.push_str(&format!("{m}:{}\n", list.join(",")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<MaskPlan, MaskError> {
        let mut seed = None;
        let mut visible: Vec<Vec<usize>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(s) = line.strip_prefix("seed=") {
                seed = Some(
                    s.parse()
                        .map_err(|_| MaskError::Parse(format!("bad seed `{s}`")))?,
                );
                continue;
            }
            let (idx, rest) = line
                .split_once(':')
                .ok_or_else(|| MaskError::Parse(format!("line {lineno}: missing `:`")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| MaskError::Parse(format!("bad modality index `{idx}`")))?;
            if idx != visible.len() {
                return Err(MaskError::Parse(format!(
                    "modality lines out of order at index {idx}"
                )));
            }
            let mut indices = Vec::new();
            if !rest.is_empty() {
                for tok in rest.split(',') {
                    indices.push(
                        tok.parse()
                            .map_err(|_| MaskError::Parse(format!("bad index `{tok}`")))?,
                    );
                }
            }
            visible.push(indices);
        }
        let seed = seed.ok_or_else(|| MaskError::Parse("missing seed line".into()))?;
        let counts = visible.iter().map(Vec::len).collect();
        Ok(MaskPlan {
            counts,
            visible,
            seed,
        })
    }
}

/// Draw modality proportions on the simplex: Dir(alpha) via normalized
/// Gamma(alpha, 1) draws, or exact 1/M shares for [`Alpha::Equal`].
pub fn sample_proportions(params: &DirichletParams, rng: &mut Rng) -> Vec<f64> {
    let m = params.num_modalities;
    match params.alpha {
        Alpha::Equal => vec![1.0 / m as f64; m],
        Alpha::Concentration(a) => {
            if m == 1 {
                return vec![1.0];
            }
            loop {
                let draws: Vec<f64> = (0..m).map(|_| rng.gamma(a)).collect();
                let sum: f64 = draws.iter().sum();
                // tiny-alpha draws can underflow to an all-zero vector; redraw
                if sum > 1e-300 {
                    return draws.iter().map(|&g| g / sum).collect();
                }
            }
        }
    }
}

/// Largest-remainder apportionment of `v` slots by proportions, with
/// per-modality capacity caps. Ties in remainders break towards the lower
/// modality index; overflow past a cap spills to the modality with the
/// next-largest remainder that still has room.
pub fn allocate_counts(
    proportions: &[f64],
    v: usize,
    caps: &[usize],
) -> Result<Vec<usize>, MaskError> {
    assert_eq!(proportions.len(), caps.len());
    let capacity: usize = caps.iter().sum();
    if v > capacity {
        return Err(MaskError::CapacityExceeded {
            requested: v,
            capacity,
        });
    }
    let m = proportions.len();
    let mut counts: Vec<usize> = proportions
        .iter()
        .map(|&p| (p * v as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(usize, f64)> = proportions
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, p * v as f64 - counts[i] as f64))
        .collect();
    // stable order: largest remainder first, lower index wins ties
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let assigned: usize = counts.iter().sum();
    let mut leftover = v - assigned;
    let mut cursor = 0;
    while leftover > 0 {
        let (i, _) = remainders[cursor % m];
        if counts[i] < caps[i] {
            counts[i] += 1;
            leftover -= 1;
        }
        cursor += 1;
    }
    // enforce caps: floor() could exceed a cap only when a proportion points
    // past a modality's grid; push the excess down the remainder order
    for i in 0..m {
        while counts[i] > caps[i] {
            let excess = counts[i] - caps[i];
            counts[i] = caps[i];
            let mut remaining = excess;
            for &(j, _) in remainders.iter().cycle().take(2 * m) {
                if remaining == 0 {
                    break;
                }
                if j != i && counts[j] < caps[j] {
                    let take = remaining.min(caps[j] - counts[j]);
                    counts[j] += take;
                    remaining -= take;
                }
            }
        }
    }
    Ok(counts)
}

/// Uniform without-replacement index draw per modality.
pub fn sample_visible_indices(counts: &[usize], caps: &[usize], rng: &mut Rng) -> Vec<Vec<usize>> {
    counts
        .iter()
        .zip(caps)
        .map(|(&k, &n)| rng.sample_without_replacement(k, n))
        .collect()
}

/// Compose the two stages into a plan; deterministic given the seed.
pub fn build_mask_plan(
    params: &DirichletParams,
    caps: &[usize],
    seed: u64,
) -> Result<MaskPlan, MaskError> {
    assert_eq!(params.num_modalities, caps.len());
    let mut rng = Rng::from_seed(seed);
    let proportions = sample_proportions(params, &mut rng);
    let counts = allocate_counts(&proportions, params.num_visible, caps)?;
    let visible = sample_visible_indices(&counts, caps, &mut rng);
    Ok(MaskPlan {
        counts,
        visible,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_modality_is_degenerate_simplex() {
        let params = DirichletParams::new(Alpha::Concentration(1.0), 1, 5).unwrap();
        let mut rng = Rng::from_seed(1);
        assert_eq!(sample_proportions(&params, &mut rng), vec![1.0]);
    }

    #[test]
    fn equal_alpha_gives_exact_thirds() {
        let params = DirichletParams::new(Alpha::Equal, 3, 98).unwrap();
        let mut rng = Rng::from_seed(2);
        assert_eq!(
            sample_proportions(&params, &mut rng),
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        );
    }

    #[test]
    fn dir1_moments_match_analytic() {
        // Dir(1) over 3 coordinates: mean 1/3, variance 1/18
        let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 98).unwrap();
        let mut rng = Rng::from_seed(3);
        let n = 100_000;
        let mut sums = [0.0f64; 3];
        let mut sq_sums = [0.0f64; 3];
        for _ in 0..n {
            let p = sample_proportions(&params, &mut rng);
            for (i, &v) in p.iter().enumerate() {
                sums[i] += v;
                sq_sums[i] += v * v;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let var = sq_sums[i] / n as f64 - mean * mean;
            assert!((mean - 1.0 / 3.0).abs() < 0.005, "mean[{i}] = {mean}");
            assert!((var - 1.0 / 18.0).abs() < 0.003, "var[{i}] = {var}");
        }
    }

    #[test]
    fn proportions_sum_to_one_for_small_alpha() {
        let params = DirichletParams::new(Alpha::Concentration(0.05), 3, 98).unwrap();
        let mut rng = Rng::from_seed(4);
        for _ in 0..1000 {
            let p = sample_proportions(&params, &mut rng);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn allocate_counts_forced_cases() {
        let caps = [196usize; 3];
        assert_eq!(
            allocate_counts(&[1.0 / 3.0; 3], 98, &caps).unwrap(),
            vec![33, 33, 32]
        );
        assert_eq!(
            allocate_counts(&[1.0, 0.0, 0.0], 98, &caps).unwrap(),
            vec![98, 0, 0]
        );
        assert_eq!(
            allocate_counts(&[0.5, 0.25, 0.25], 98, &caps).unwrap(),
            vec![49, 25, 24]
        );
    }

    #[test]
    fn allocate_counts_largest_remainder_bound() {
        // |count_m - lambda_m * V| < 1 before any cap spill
        let mut rng = Rng::from_seed(5);
        let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 98).unwrap();
        for _ in 0..500 {
            let p = sample_proportions(&params, &mut rng);
            let counts = allocate_counts(&p, 98, &[196; 3]).unwrap();
            assert_eq!(counts.iter().sum::<usize>(), 98);
            for (c, &l) in counts.iter().zip(&p) {
                assert!((*c as f64 - l * 98.0).abs() < 1.0);
            }
        }
    }

    #[test]
    fn allocate_counts_respects_caps_and_spills() {
        // proportions point past modality 0's capacity; excess spills
        let counts = allocate_counts(&[0.9, 0.05, 0.05], 60, &[20, 40, 40]).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 60);
        assert_eq!(counts[0], 20);
        assert!(counts[1] <= 40 && counts[2] <= 40);
    }

    #[test]
    fn allocate_counts_rejects_overfull() {
        assert_eq!(
            allocate_counts(&[0.5, 0.5], 99, &[49, 49]).unwrap_err(),
            MaskError::CapacityExceeded {
                requested: 99,
                capacity: 98
            }
        );
    }

    #[test]
    fn visible_indices_edge_cases() {
        let mut rng = Rng::from_seed(6);
        let out = sample_visible_indices(&[4, 0], &[4, 9], &mut rng);
        assert_eq!(out[0], vec![0, 1, 2, 3]); // count == cap draws everything
        assert!(out[1].is_empty());
    }

    #[test]
    fn visible_indices_are_uniform() {
        // count 49 of 196: each index appears with frequency 0.25
        let mut rng = Rng::from_seed(7);
        let trials = 100_000;
        let mut hits = vec![0usize; 196];
        for _ in 0..trials {
            for i in rng.sample_without_replacement(49, 196) {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / trials as f64;
            assert!((freq - 0.25).abs() < 0.01, "index {i}: freq {freq}");
        }
    }

    #[test]
    fn plan_is_deterministic_and_totals_paper_arithmetic() {
        // 224 res, 3 modalities: caps 196 each; V = 98 = (1/6) * 588
        let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 98).unwrap();
        let caps = [196usize; 3];
        let a = build_mask_plan(&params, &caps, 1234).unwrap();
        let b = build_mask_plan(&params, &caps, 1234).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_visible(), 98);
        assert_eq!(588 / 6, 98);
        for (m, indices) in a.visible.iter().enumerate() {
            assert_eq!(indices.len(), a.counts[m]);
            for w in indices.windows(2) {
                assert!(w[0] < w[1], "indices sorted and unique");
            }
        }
    }

    #[test]
    fn small_alpha_concentrates_mass_more_than_alpha_one() {
        let caps = [196usize; 3];
        let share_fraction = |alpha: f64, seed: u64| -> f64 {
            let params = DirichletParams::new(Alpha::Concentration(alpha), 3, 98).unwrap();
            let n = 10_000;
            let mut concentrated = 0usize;
            for i in 0..n {
                let plan = build_mask_plan(&params, &caps, seed + i).unwrap();
                if plan.max_share() > 0.9 {
                    concentrated += 1;
                }
            }
            concentrated as f64 / n as f64
        };
        let low = share_fraction(0.2, 10_000);
        let one = share_fraction(1.0, 20_000);
        assert!(
            low > one,
            "alpha 0.2 should concentrate more often: {low} vs {one}"
        );
    }

    #[test]
    fn equal_alpha_partition_differs_by_at_most_one() {
        let params = DirichletParams::new(Alpha::Equal, 3, 98).unwrap();
        let plan = build_mask_plan(&params, &[196; 3], 9).unwrap();
        assert_eq!(plan.counts, vec![33, 33, 32]);
        let params4 = DirichletParams::new(Alpha::Equal, 4, 98).unwrap();
        let plan4 = build_mask_plan(&params4, &[196; 4], 9).unwrap();
        let min = plan4.counts.iter().min().unwrap();
        let max = plan4.counts.iter().max().unwrap();
        assert!(max - min <= 1);
        assert_eq!(plan4.num_visible(), 98);
    }

    #[test]
    fn modality_relabeling_permutes_counts() {
        // permuting the proportions permutes the counts the same way
        // (exchangeability of the apportionment under relabeling)
        let p = [0.61, 0.28, 0.11];
        let counts = allocate_counts(&p, 97, &[196; 3]).unwrap();
        let permuted = [p[2], p[0], p[1]];
        let counts_p = allocate_counts(&permuted, 97, &[196; 3]).unwrap();
        assert_eq!(counts_p, vec![counts[2], counts[0], counts[1]]);
    }

    #[test]
    fn plan_text_round_trip() {
        let params = DirichletParams::new(Alpha::Concentration(1.0), 3, 10).unwrap();
        let plan = build_mask_plan(&params, &[16; 3], 77).unwrap();
        let text = plan.to_text();
        let back = MaskPlan::from_text(&text).unwrap();
        assert_eq!(plan, back);
        assert!(MaskPlan::from_text("0:1,2\n").is_err(), "missing seed");
    }

    #[test]
    fn alpha_parsing() {
        assert_eq!(Alpha::parse("equal").unwrap(), Alpha::Equal);
        assert_eq!(Alpha::parse("1.5").unwrap(), Alpha::Concentration(1.5));
        assert!(Alpha::parse("-1").is_err());
        assert!(Alpha::parse("zebra").is_err());
    }
}
