//! RD cost, RDOQ baseline, greedy group refinement and a brute-force oracle.
//!
//! Cost is `J = D + lambda * R` with `D = step^2 * sum((q - x)^2)`.
//! Ties between equal-cost assignments are broken, in order, by smaller
//! `sum |q|`, lexicographically smaller magnitudes in raster order, and
//! lexicographically smaller signed levels. The first two keys are
//! sign-symmetric, which keeps every search sign-equivariant.

use std::cmp::Ordering;

use crate::codec::{deadzone_quantize, nir_quantize, scalar_quantize, sign_of, CoeffBlock, LevelBlock, QuantParams};
use crate::error::{ensure, Result};
use crate::rate::{GroupAccumulator, GroupLayout, RateModel, GROUP_LEN};

/// Most candidate assignments the oracle will enumerate.
pub const ORACLE_MAX_SPACE: u64 = 1 << 24;

/// Sweep limit of the coordinate-descent baseline.
pub const RDOQ_MAX_SWEEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdCost {
    pub distortion: f64,
    pub rate: u32,
    pub cost: f64,
}

/// The single place where squared error and rate are combined; the search,
/// the oracle and [`rd_cost`] all go through it so costs compare exactly.
#[inline]
fn lagrangian(sum_sq: f64, rate: u32, params: &QuantParams) -> RdCost {
    let distortion = params.step * params.step * sum_sq;
    RdCost { distortion, rate, cost: distortion + params.lambda * f64::from(rate) }
}

#[inline]
fn sq_err(level: i32, x: f64) -> f64 {
    let e = f64::from(level) - x;
    e * e
}

pub fn rd_cost<R: RateModel>(x: &CoeffBlock, q: &LevelBlock, params: &QuantParams, model: &R) -> Result<RdCost> {
    ensure!(
        x.n == q.n && x.values.len() == q.levels.len(),
        ShapeMismatch,
        "coefficients {}x{} vs levels {}x{}",
        x.n,
        x.n,
        q.n,
        q.n
    );
    let sum_sq = q.levels.iter().zip(&x.values).map(|(&l, &v)| sq_err(l, v)).sum();
    Ok(lagrangian(sum_sq, model.block_rate(q)?, params))
}

/// Tie-break order on the level vectors of two equal-cost assignments.
fn tie_order(a: &[i32], b: &[i32]) -> Ordering {
    let abs_sum = |v: &[i32]| v.iter().map(|l| i64::from(l.unsigned_abs())).sum::<i64>();
    abs_sum(a)
        .cmp(&abs_sum(b))
        .then_with(|| a.iter().map(|l| l.unsigned_abs()).cmp(b.iter().map(|l| l.unsigned_abs())))
        .then_with(|| a.cmp(b))
}

/// Total order used by every search: cost first, then [`tie_order`].
fn better(cost_a: f64, a: &[i32], cost_b: f64, b: &[i32]) -> bool {
    match cost_a.partial_cmp(&cost_b).unwrap_or(Ordering::Equal) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => tie_order(a, b) == Ordering::Less,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Each coefficient keeps its level or moves one step toward zero.
    KeepOrDecrement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    pub passes: usize,
    pub policy: CandidatePolicy,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { passes: 2, policy: CandidatePolicy::KeepOrDecrement }
    }
}

impl SearchConfig {
    pub fn with_passes(passes: usize) -> Result<Self> {
        let cfg = Self { passes, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.passes >= 1, InvalidParam, "passes must be at least 1");
        Ok(())
    }
}

/// Coordinate-descent RDOQ.
///
/// Starts from the cheaper of nearest-integer and deadzone quantization and
/// sweeps coefficients in reverse raster order, choosing for each the best of
/// `{0, floor|x|, floor|x| + 1}` (signed like `x`), until a sweep changes
/// nothing or [`RDOQ_MAX_SWEEPS`] is reached.
pub fn rdoq_baseline<R: RateModel>(x: &CoeffBlock, params: &QuantParams, model: &R) -> Result<LevelBlock> {
    let layout = GroupLayout::new(x.n)?;
    let nir = nir_quantize(x);
    let dz = deadzone_quantize(x);
    let j_nir = rd_cost(x, &nir, params, model)?.cost;
    let j_dz = rd_cost(x, &dz, params, model)?.cost;
    let (start, j_start) = if better(j_dz, &dz.levels, j_nir, &nir.levels) { (dz, j_dz) } else { (nir, j_nir) };

    let mut q = start.clone();
    let mut accs: Vec<R::Acc> = (0..layout.count()).map(|g| model.accumulator(&layout.gather(g, &q.levels))).collect();
    let s2 = params.step * params.step;
    let tol = 1e-12 * (1.0 + j_start.abs());

    for _ in 0..RDOQ_MAX_SWEEPS {
        let mut changed = false;
        for pos in (0..q.levels.len()).rev() {
            let v = x.values[pos];
            let sign = i32::from(sign_of(v));
            let floor = v.abs().floor() as i32;
            let cur = q.levels[pos];
            let acc = &accs[layout.group_of(pos)];
            let base_rate = i64::from(acc.rate());
            let d_cur = sq_err(cur, v);

            let mut best: Option<(f64, i32)> = None;
            for mag in [0, floor, floor + 1] {
                let cand = sign * mag;
                if cand == cur {
                    continue;
                }
                let mut trial = acc.clone();
                trial.replace(cur, cand);
                let d_rate = i64::from(trial.rate()) - base_rate;
                let delta = s2 * (sq_err(cand, v) - d_cur) + params.lambda * d_rate as f64;
                let wins = match best {
                    None => true,
                    Some((bd, bc)) => delta < bd || (delta == bd && cand.abs() < bc.abs()),
                };
                if wins {
                    best = Some((delta, cand));
                }
            }
            if let Some((delta, cand)) = best {
                if delta < -tol {
                    accs[layout.group_of(pos)].replace(cur, cand);
                    q.levels[pos] = cand;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    // Float summation order differs between the incremental deltas and the
    // full cost; never hand back something the full cost ranks worse.
    let j_out = rd_cost(x, &q, params, model)?.cost;
    Ok(if j_out <= j_start { q } else { start })
}

/// Greedy per-group exhaustive refinement.
///
/// Visits 4×4 groups in raster order from the top-left. For each group every
/// combination of `{q_i, sign(q_i) * (|q_i| - 1)}` over its nonzero levels is
/// evaluated with the other groups fixed, and the cheapest is kept. The whole
/// sweep is repeated up to `cfg.passes` times or until nothing changes.
pub fn greedy_group_refine<R: RateModel>(
    x: &CoeffBlock,
    q_init: &LevelBlock,
    params: &QuantParams,
    cfg: &SearchConfig,
    model: &R,
) -> Result<LevelBlock> {
    ensure!(cfg.passes >= 1, InvalidParam, "passes must be at least 1");
    let layout = GroupLayout::new(x.n)?;
    let j_init = rd_cost(x, q_init, params, model)?.cost;

    let mut q = q_init.clone();
    for _ in 0..cfg.passes {
        let mut changed = false;
        for g in 0..layout.count() {
            changed |= refine_group(x, &mut q, &layout.positions(g), params, model);
        }
        if !changed {
            break;
        }
    }

    let j_out = rd_cost(x, &q, params, model)?.cost;
    Ok(if j_out <= j_init { q } else { q_init.clone() })
}

/// Exact cost of one group's assignment, independent of the other groups.
fn group_cost<R: RateModel>(levels: &[i32; GROUP_LEN], xs: &[f64; GROUP_LEN], params: &QuantParams, model: &R) -> f64 {
    let sum_sq = levels.iter().zip(xs).map(|(&l, &v)| sq_err(l, v)).sum();
    lagrangian(sum_sq, model.group_rate(levels), params).cost
}

/// Exhaustive search over one group via a Gray-code walk. Returns whether the
/// group changed.
fn refine_group<R: RateModel>(
    x: &CoeffBlock,
    q: &mut LevelBlock,
    positions: &[usize; GROUP_LEN],
    params: &QuantParams,
    model: &R,
) -> bool {
    let current: [i32; GROUP_LEN] = positions.map(|p| q.levels[p]);
    let xs: [f64; GROUP_LEN] = positions.map(|p| x.values[p]);

    // Members with two candidates: (slot in group, kept level, decremented level).
    let active: Vec<(usize, i32, i32)> = current
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0)
        .map(|(j, &l)| (j, l, l - l.signum()))
        .collect();
    if active.is_empty() {
        return false;
    }

    let s2 = params.step * params.step;
    let d_keep: Vec<f64> = active.iter().map(|&(j, l, _)| s2 * sq_err(l, xs[j])).collect();
    let d_dec: Vec<f64> = active.iter().map(|&(j, _, l)| s2 * sq_err(l, xs[j])).collect();
    let scale: f64 = d_keep.iter().zip(&d_dec).map(|(a, b)| a.max(*b)).sum::<f64>()
        + params.lambda * f64::from(model.group_rate(&current))
        + 1.0;
    let tol = 1e-9 * scale;

    let assignment = |mask: u32| -> [i32; GROUP_LEN] {
        let mut levels = current;
        for (bit, &(j, _, dec)) in active.iter().enumerate() {
            if mask >> bit & 1 == 1 {
                levels[j] = dec;
            }
        }
        levels
    };

    let mut acc = model.accumulator(&current);
    let zeros: f64 = (0..GROUP_LEN).filter(|&j| current[j] == 0).map(|j| s2 * sq_err(0, xs[j])).sum();
    let mut dist = d_keep.iter().sum::<f64>() + zeros;

    let mut mask = 0u32;
    let mut best_mask = 0u32;
    let mut best_approx = dist + params.lambda * f64::from(acc.rate());
    let mut best_exact: Option<f64> = None;

    let total = 1u64 << active.len();
    for step in 1..total {
        let bit = step.trailing_zeros() as usize;
        let (_, keep, dec) = active[bit];
        if mask >> bit & 1 == 0 {
            dist += d_dec[bit] - d_keep[bit];
            acc.replace(keep, dec);
        } else {
            dist += d_keep[bit] - d_dec[bit];
            acc.replace(dec, keep);
        }
        mask ^= 1 << bit;

        let approx = dist + params.lambda * f64::from(acc.rate());
        if approx < best_approx - tol {
            best_mask = mask;
            best_approx = approx;
            best_exact = None;
        } else if approx <= best_approx + tol {
            let cand = assignment(mask);
            let incumbent = assignment(best_mask);
            let cand_cost = group_cost(&cand, &xs, params, model);
            let inc_cost = *best_exact.get_or_insert_with(|| group_cost(&incumbent, &xs, params, model));
            if better(cand_cost, &cand, inc_cost, &incumbent) {
                best_mask = mask;
                best_approx = approx;
                best_exact = Some(cand_cost);
            }
        }
    }

    if best_mask == 0 {
        return false;
    }
    let chosen = assignment(best_mask);
    if !better(group_cost(&chosen, &xs, params, model), &chosen, group_cost(&current, &xs, params, model), &current) {
        return false;
    }
    for (p, l) in positions.iter().zip(chosen) {
        q.levels[*p] = l;
    }
    true
}

/// Exact argmin of `cost` over the product of `candidates`, with the crate's
/// tie-break order.
pub fn brute_force_argmin(candidates: &[Vec<i32>], mut cost: impl FnMut(&[i32]) -> f64) -> Result<Vec<i32>> {
    ensure!(candidates.iter().all(|c| !c.is_empty()), InvalidParam, "empty candidate set");
    let space = candidates.iter().try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64));
    ensure!(
        matches!(space, Some(s) if s <= ORACLE_MAX_SPACE),
        OutOfRange,
        "candidate space exceeds {ORACLE_MAX_SPACE}"
    );

    let mut digits = vec![0usize; candidates.len()];
    let mut levels: Vec<i32> = candidates.iter().map(|c| c[0]).collect();
    let mut best = levels.clone();
    let mut best_cost = cost(&levels);
    loop {
        // Mixed-radix increment, least significant digit last.
        let mut i = candidates.len();
        loop {
            if i == 0 {
                return Ok(best);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < candidates[i].len() {
                levels[i] = candidates[i][digits[i]];
                break;
            }
            digits[i] = 0;
            levels[i] = candidates[i][0];
        }
        let c = cost(&levels);
        if better(c, &levels, best_cost, &best) {
            best_cost = c;
            best.clone_from(&levels);
        }
    }
}

/// Brute-force RDOQ over an explicit per-coefficient candidate list for a
/// single 4×4 block.
pub fn brute_force_oracle<R: RateModel>(
    x: &CoeffBlock,
    candidates: &[Vec<i32>],
    params: &QuantParams,
    model: &R,
) -> Result<LevelBlock> {
    ensure!(x.n == 4, Unsupported, "oracle runs on 4x4 blocks, got {}x{}", x.n, x.n);
    ensure!(candidates.len() == 16, ShapeMismatch, "{} candidate sets for 16 coefficients", candidates.len());
    let mut scratch = LevelBlock::zeros(4);
    let best = brute_force_argmin(candidates, |levels| {
        scratch.levels.copy_from_slice(levels);
        let sum_sq = levels.iter().zip(&x.values).map(|(&l, &v)| sq_err(l, v)).sum();
        let rate = model.block_rate(&scratch).unwrap_or(u32::MAX);
        lagrangian(sum_sq, rate, params).cost
    })?;
    LevelBlock::new(4, best)
}

/// Candidate sets `{q_i, sign(q_i) * (|q_i| - 1)}` (one entry where `q_i = 0`).
pub fn keep_or_decrement_candidates(q: &LevelBlock) -> Vec<Vec<i32>> {
    q.levels
        .iter()
        .map(|&l| if l == 0 { vec![0] } else { vec![l, l - l.signum()] })
        .collect()
}

/// Training label for one block: the scalar-quantized input and the refined
/// target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Label {
    pub q_sq: LevelBlock,
    pub q_ref: LevelBlock,
}

/// `q_sq` uses `params.offset`. `q_ref` is the greedy refinement of the RDOQ
/// baseline when that is strictly cheaper, otherwise the baseline itself.
pub fn make_label<R: RateModel>(x: &CoeffBlock, params: &QuantParams, cfg: &SearchConfig, model: &R) -> Result<Label> {
    let q_sq = scalar_quantize(x, params);
    let rdoq = rdoq_baseline(x, params, model)?;
    let refined = greedy_group_refine(x, &rdoq, params, cfg, model)?;
    let q_ref = if rd_cost(x, &refined, params, model)?.cost < rd_cost(x, &rdoq, params, model)?.cost {
        refined
    } else {
        rdoq
    };
    Ok(Label { q_sq, q_ref })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::EgSigRate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(step: f64, lambda: f64) -> QuantParams {
        QuantParams { qp: 22, step, offset: 0.5, lambda }
    }

    fn random_x(rng: &mut impl Rng, n: usize, spread: f64) -> CoeffBlock {
        CoeffBlock::new(n, (0..n * n).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap()
    }

    #[test]
    fn rd_cost_examples() {
        let m = EgSigRate;
        let c = rd_cost(&CoeffBlock::zeros(4), &LevelBlock::zeros(4), &params(2.0, 0.7), &m).unwrap();
        assert_eq!((c.distortion, c.rate, c.cost), (0.0, 1, 0.7));

        let mut x = CoeffBlock::zeros(4);
        x.values[6] = 1.6;
        let mut q = LevelBlock::zeros(4);
        q.levels[6] = 2;
        let c = rd_cost(&x, &q, &params(2.0, 0.7), &m).unwrap();
        assert!((c.distortion - 0.64).abs() < 1e-12);
        assert_eq!(c.rate, 21);
        assert!((c.cost - (0.64 + 21.0 * 0.7)).abs() < 1e-12);
        assert!(rd_cost(&x, &LevelBlock::zeros(8), &params(2.0, 0.7), &m).is_err());
    }

    #[test]
    fn nir_is_locally_optimal_without_rate() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = params(3.0, 0.0);
        for _ in 0..50 {
            let x = random_x(&mut rng, 4, 6.0);
            let nir = nir_quantize(&x);
            let j = rd_cost(&x, &nir, &p, &m).unwrap().cost;
            for i in 0..16 {
                for d in [-1, 1] {
                    let mut q = nir.clone();
                    q.levels[i] += d;
                    assert!(rd_cost(&x, &q, &p, &m).unwrap().cost >= j);
                }
            }
        }
    }

    #[test]
    fn rdoq_examples() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let x = random_x(&mut rng, 8, 5.0);
            assert_eq!(rdoq_baseline(&x, &params(4.0, 0.0), &m).unwrap(), nir_quantize(&x));
            let p = params(4.0, 1.5);
            let out = rdoq_baseline(&x, &p, &m).unwrap();
            let j = rd_cost(&x, &out, &p, &m).unwrap().cost;
            assert!(j <= rd_cost(&x, &nir_quantize(&x), &p, &m).unwrap().cost);
            assert!(j <= rd_cost(&x, &deadzone_quantize(&x), &p, &m).unwrap().cost);
        }
        for lambda in [0.1, 10.0, 1000.0] {
            assert_eq!(rdoq_baseline(&CoeffBlock::zeros(4), &params(2.0, lambda), &m).unwrap(), LevelBlock::zeros(4));
        }
    }

    #[test]
    fn rdoq_rate_non_increasing_in_lambda() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let x = random_x(&mut rng, 4, 3.0);
            let mut last = u32::MAX;
            for lambda in [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
                let r = m.block_rate(&rdoq_baseline(&x, &params(1.0, lambda), &m).unwrap()).unwrap();
                assert!(r <= last, "rate rose to {r} from {last} at lambda {lambda}");
                last = r;
            }
        }
    }

    #[test]
    fn greedy_fixed_points() {
        let m = EgSigRate;
        let p = params(2.0, 1.0);
        let x = CoeffBlock::new(4, vec![0.2; 16]).unwrap();
        let zeros = LevelBlock::zeros(4);
        assert_eq!(greedy_group_refine(&x, &zeros, &p, &SearchConfig::default(), &m).unwrap(), zeros);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_x(&mut rng, 4, 4.0);
        let once = greedy_group_refine(&x, &nir_quantize(&x), &p, &SearchConfig::with_passes(1).unwrap(), &m).unwrap();
        let again = greedy_group_refine(&x, &once, &p, &SearchConfig::with_passes(1).unwrap(), &m).unwrap();
        let oracle = brute_force_oracle(&x, &keep_or_decrement_candidates(&once), &p, &m).unwrap();
        assert_eq!(again, oracle);
        assert!(SearchConfig::with_passes(0).is_err());
        assert!(greedy_group_refine(&random_x(&mut rng, 2, 1.0), &LevelBlock::zeros(2), &p, &SearchConfig::default(), &m).is_err());
    }

    #[test]
    fn greedy_matches_oracle_on_4x4() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = SearchConfig::with_passes(1).unwrap();
        for trial in 0..100 {
            let x = random_x(&mut rng, 4, 4.0);
            let p = params(1.0 + trial as f64 * 0.05, rng.gen_range(0.05..3.0));
            let init = nir_quantize(&x);
            let greedy = greedy_group_refine(&x, &init, &p, &cfg, &m).unwrap();
            let oracle = brute_force_oracle(&x, &keep_or_decrement_candidates(&init), &p, &m).unwrap();
            assert_eq!(greedy, oracle, "trial {trial}");
        }
    }

    #[test]
    fn greedy_never_increases_cost_and_is_sign_equivariant() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [4, 8, 16] {
            for _ in 0..10 {
                let x = random_x(&mut rng, n, 3.0);
                let p = params(2.0, rng.gen_range(0.1..2.0));
                let init = nir_quantize(&x);
                let out = greedy_group_refine(&x, &init, &p, &SearchConfig::default(), &m).unwrap();
                assert!(rd_cost(&x, &out, &p, &m).unwrap().cost <= rd_cost(&x, &init, &p, &m).unwrap().cost);
                let neg = greedy_group_refine(&x.negated(), &init.negated(), &p, &SearchConfig::default(), &m).unwrap();
                assert_eq!(neg, out.negated());
                assert_eq!(rdoq_baseline(&x.negated(), &p, &m).unwrap(), rdoq_baseline(&x, &p, &m).unwrap().negated());
            }
        }
    }

    #[test]
    fn oracle_examples() {
        let m = EgSigRate;
        let x = CoeffBlock::new(4, (0..16).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let single: Vec<Vec<i32>> = (0..16).map(|i| vec![i % 3]).collect();
        let out = brute_force_oracle(&x, &single, &params(1.0, 1.0), &m).unwrap();
        assert_eq!(out.levels, (0..16).map(|i| i % 3).collect::<Vec<_>>());

        let nir = nir_quantize(&x);
        let zero_lambda = QuantParams { lambda: 0.0, ..params(1.0, 1.0) };
        let too_many: Vec<Vec<i32>> = nir.levels.iter().map(|&l| vec![l - 1, l, l + 1]).collect();
        assert!(brute_force_oracle(&x, &too_many, &zero_lambda, &m).is_err());
        let small: Vec<Vec<i32>> = nir.levels.iter().enumerate().map(|(i, &l)| if i < 8 { vec![l - 1, l, l + 1] } else { vec![l] }).collect();
        assert_eq!(brute_force_oracle(&x, &small, &zero_lambda, &m).unwrap(), nir);
        assert!(brute_force_oracle(&CoeffBlock::zeros(8), &small, &zero_lambda, &m).is_err());
    }

    /// Exhaustive search in a different iteration order (recursive, first
    /// coefficient varies fastest) as an independent check on the argmin.
    fn recursive_argmin(cands: &[Vec<i32>], cost: &dyn Fn(&[i32]) -> f64) -> (f64, Vec<i32>) {
        fn go(i: usize, cands: &[Vec<i32>], cur: &mut Vec<i32>, cost: &dyn Fn(&[i32]) -> f64, best: &mut Option<(f64, Vec<i32>)>) {
            if i == cands.len() {
                let c = cost(cur);
                let replace = match best {
                    None => true,
                    Some((bc, bl)) => better(c, cur, *bc, bl),
                };
                if replace {
                    *best = Some((c, cur.clone()));
                }
                return;
            }
            for &v in cands[i].iter().rev() {
                cur[i] = v;
                go(i + 1, cands, cur, cost, best);
            }
        }
        let mut best = None;
        go(0, cands, &mut vec![0; cands.len()], cost, &mut best);
        best.unwrap()
    }

    #[test]
    fn toy_2x2_matches_independent_enumeration() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lambda = rng.gen_range(0.05..2.0);
            let cost = |levels: &[i32]| {
                let mut g = [0; 16];
                g[..4].copy_from_slice(levels);
                levels.iter().zip(&xs).map(|(&l, &v)| sq_err(l, v)).sum::<f64>() + lambda * f64::from(m.group_rate(&g))
            };
            let cands: Vec<Vec<i32>> = xs.iter().map(|v| {
                let r = v.round() as i32;
                vec![r - 1, r, r + 1]
            }).collect();
            let a = brute_force_argmin(&cands, cost).unwrap();
            let (_, b) = recursive_argmin(&cands, &cost);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn labels_respect_chain() {
        let m = EgSigRate;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = QuantParams::from_qp(22, 0.5).unwrap();
        let zero = make_label(&CoeffBlock::zeros(4), &p, &SearchConfig::default(), &m).unwrap();
        assert_eq!(zero.q_sq, LevelBlock::zeros(4));
        assert_eq!(zero.q_ref, LevelBlock::zeros(4));
        for _ in 0..100 {
            let x = random_x(&mut rng, 8, 3.0);
            let label = make_label(&x, &p, &SearchConfig::default(), &m).unwrap();
            let j_ref = rd_cost(&x, &label.q_ref, &p, &m).unwrap().cost;
            let j_rdoq = rd_cost(&x, &rdoq_baseline(&x, &p, &m).unwrap(), &p, &m).unwrap().cost;
            assert!(j_ref <= j_rdoq);
            assert!(j_ref <= rd_cost(&x, &label.q_sq, &p, &m).unwrap().cost);
        }
    }
}
