//! Additive rate model over 4×4 coefficient groups.
//!
//! The baseline coder ("eg-sig-v1") spends, per group: one coded-group flag;
//! when any level is nonzero, one significance bit per coefficient; and per
//! nonzero level one sign bit plus an order-0 Exp-Golomb code of `|q| - 1`.
//! Groups are independent, so a single-coefficient change only touches the
//! rate of its own group.

use crate::codec::LevelBlock;
use crate::error::{ensure, Result};

pub const GROUP_SIDE: usize = 4;
pub const GROUP_LEN: usize = GROUP_SIDE * GROUP_SIDE;

/// Order-0 Exp-Golomb code length: `2 * floor(log2(v + 1)) + 1`.
#[inline]
pub fn eg0_length(v: u32) -> u32 {
    let w = u64::from(v) + 1;
    2 * (63 - w.leading_zeros()) + 1
}

/// Incremental rate of one coefficient group.
pub trait GroupAccumulator: Clone {
    fn rate(&self) -> u32;
    /// Replaces one level `old` with `new` inside the group.
    fn replace(&mut self, old: i32, new: i32);
}

/// A rate model that is additive over 4×4 groups in raster order.
pub trait RateModel: Sync {
    type Acc: GroupAccumulator;

    fn name(&self) -> &str;

    /// Accumulator initialised from the 16 levels of a group.
    fn accumulator(&self, group: &[i32]) -> Self::Acc;

    fn group_rate(&self, group: &[i32]) -> u32 {
        self.accumulator(group).rate()
    }

    fn block_rate(&self, q: &LevelBlock) -> Result<u32> {
        let groups = GroupLayout::new(q.n)?;
        Ok((0..groups.count()).map(|g| self.group_rate(&groups.gather(g, &q.levels))).sum())
    }

    /// `block_rate(q with q[pos] = level) - block_rate(q)`, touching only the
    /// affected group.
    fn rate_delta(&self, q: &LevelBlock, pos: usize, level: i32) -> Result<i64> {
        let groups = GroupLayout::new(q.n)?;
        ensure!(pos < q.levels.len(), OutOfRange, "position {pos} in a {}x{} block", q.n, q.n);
        let g = groups.group_of(pos);
        let mut acc = self.accumulator(&groups.gather(g, &q.levels));
        let before = acc.rate();
        acc.replace(q.levels[pos], level);
        Ok(i64::from(acc.rate()) - i64::from(before))
    }
}

/// Group-flag + significance + sign + EG0 coder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EgSigRate;

impl EgSigRate {
    pub const NAME: &'static str = "eg-sig-v1";

    /// Bits for one nonzero level: sign plus EG0 of `|q| - 1`.
    #[inline]
    fn level_bits(level: i32) -> u32 {
        if level == 0 {
            0
        } else {
            1 + eg0_length(level.unsigned_abs() - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EgSigAcc {
    nonzero: u32,
    level_bits: u32,
}

impl GroupAccumulator for EgSigAcc {
    #[inline]
    fn rate(&self) -> u32 {
        if self.nonzero == 0 {
            1
        } else {
            1 + GROUP_LEN as u32 + self.level_bits
        }
    }

    #[inline]
    fn replace(&mut self, old: i32, new: i32) {
        self.nonzero = self.nonzero - u32::from(old != 0) + u32::from(new != 0);
        self.level_bits = self.level_bits - EgSigRate::level_bits(old) + EgSigRate::level_bits(new);
    }
}

impl RateModel for EgSigRate {
    type Acc = EgSigAcc;

    fn name(&self) -> &str {
        Self::NAME
    }

    fn accumulator(&self, group: &[i32]) -> EgSigAcc {
        debug_assert_eq!(group.len(), GROUP_LEN);
        EgSigAcc {
            nonzero: group.iter().filter(|&&l| l != 0).count() as u32,
            level_bits: group.iter().map(|&l| Self::level_bits(l)).sum(),
        }
    }
}

/// Maps between block raster positions and 4×4 group members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupLayout {
    n: usize,
    per_row: usize,
}

impl GroupLayout {
    pub fn new(n: usize) -> Result<Self> {
        ensure!(n >= GROUP_SIDE && n.is_multiple_of(GROUP_SIDE), Unsupported, "block side {n} is not a multiple of 4");
        Ok(Self { n, per_row: n / GROUP_SIDE })
    }

    pub fn count(&self) -> usize {
        self.per_row * self.per_row
    }

    /// Block raster positions of group `g`, in group raster order.
    pub fn positions(&self, g: usize) -> [usize; GROUP_LEN] {
        let gy = g / self.per_row;
        let gx = g % self.per_row;
        let mut out = [0; GROUP_LEN];
        for (i, p) in out.iter_mut().enumerate() {
            let y = gy * GROUP_SIDE + i / GROUP_SIDE;
            let x = gx * GROUP_SIDE + i % GROUP_SIDE;
            *p = y * self.n + x;
        }
        out
    }

    pub fn group_of(&self, pos: usize) -> usize {
        let y = pos / self.n;
        let x = pos % self.n;
        (y / GROUP_SIDE) * self.per_row + x / GROUP_SIDE
    }

    pub fn gather(&self, g: usize, levels: &[i32]) -> [i32; GROUP_LEN] {
        self.positions(g).map(|p| levels[p])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_block(rng: &mut impl Rng, n: usize) -> LevelBlock {
        let levels = (0..n * n)
            .map(|_| if rng.gen_bool(0.6) { 0 } else { rng.gen_range(-20..=20) })
            .collect();
        LevelBlock::new(n, levels).unwrap()
    }

    #[test]
    fn eg0_examples() {
        assert_eq!(eg0_length(0), 1);
        assert_eq!(eg0_length(1), 3);
        assert_eq!(eg0_length(2), 3);
        assert_eq!(eg0_length(3), 5);
        assert_eq!(eg0_length(7), 7);
        assert_eq!(eg0_length(u32::MAX), 65);
    }

    #[test]
    fn group_rate_examples() {
        let m = EgSigRate;
        assert_eq!(m.group_rate(&[0; 16]), 1);
        let mut g = [0; 16];
        g[5] = 2;
        assert_eq!(m.group_rate(&g), 21);
        g[5] = 1;
        assert_eq!(m.group_rate(&g), 19);
        g[5] = -1;
        assert_eq!(m.group_rate(&g), 19);
    }

    #[test]
    fn block_rate_examples() {
        let m = EgSigRate;
        assert_eq!(m.block_rate(&LevelBlock::zeros(8)).unwrap(), 4);
        let mut q = LevelBlock::zeros(4);
        q.levels[3] = 2;
        assert_eq!(m.block_rate(&q).unwrap(), 21);
        assert!(m.block_rate(&LevelBlock::zeros(2)).is_err());
        assert!(m.block_rate(&LevelBlock::zeros(6)).is_err());
    }

    #[test]
    fn block_rate_is_group_sum() {
        let m = EgSigRate;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [4, 8, 16, 32] {
            let q = random_block(&mut rng, n);
            let mut total = 0;
            for gy in 0..n / 4 {
                for gx in 0..n / 4 {
                    let mut g = Vec::new();
                    for y in 0..4 {
                        for x in 0..4 {
                            g.push(q.levels[(gy * 4 + y) * n + gx * 4 + x]);
                        }
                    }
                    total += m.group_rate(&g);
                }
            }
            assert_eq!(m.block_rate(&q).unwrap(), total);
        }
    }

    #[test]
    fn rate_delta_examples() {
        let m = EgSigRate;
        let mut q = LevelBlock::zeros(8);
        q.levels[9] = 3;
        assert_eq!(m.rate_delta(&q, 9, 3).unwrap(), 0);
        assert_eq!(m.rate_delta(&q, 9, 0).unwrap(), -(i64::from(m.group_rate(&[3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0])) - 1));
        assert!(m.rate_delta(&q, 64, 0).is_err());
    }

    #[test]
    fn rate_delta_matches_recomputation() {
        let m = EgSigRate;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = [4, 8, 16][rng.gen_range(0..3)];
            let q = random_block(&mut rng, n);
            let pos = rng.gen_range(0..n * n);
            let level = rng.gen_range(-6..=6);
            let mut q2 = q.clone();
            q2.levels[pos] = level;
            let full = i64::from(m.block_rate(&q2).unwrap()) - i64::from(m.block_rate(&q).unwrap());
            assert_eq!(m.rate_delta(&q, pos, level).unwrap(), full);
        }
    }

    proptest! {
        #[test]
        fn sign_invariant_and_monotone(levels in proptest::collection::vec(-40i32..40, 64), pos in 0usize..64) {
            let m = EgSigRate;
            let q = LevelBlock::new(8, levels).unwrap();
            let r = m.block_rate(&q).unwrap();
            prop_assert_eq!(r, m.block_rate(&q.negated()).unwrap());
            prop_assert!(r >= m.block_rate(&LevelBlock::zeros(8)).unwrap());
            let mut bigger = q.clone();
            let l = bigger.levels[pos];
            bigger.levels[pos] = if l < 0 { l - 1 } else { l + 1 };
            prop_assert!(m.block_rate(&bigger).unwrap() >= r);
        }
    }
}
