//! Exact Shapley and Owen values over complete coalition tables, the
//! permutation oracle used to test them, and the explanation type shared with
//! the sampling explainers.

mod explanation;
mod table;

use std::time::Instant;

pub use explanation::{Explanation, ExplanationMode, GroupValues};
pub use table::CoalitionTable;

use crate::error::{Error, Result};
use crate::model::{batched_forward, ModelParams};
use crate::schema::{FeatureSchema, ForecastExample, GroupMask};

/// Largest group count [`explain`] enumerates by default.
pub const DEFAULT_ENUMERATION_CAP: usize = 20;

/// Compensated (Neumaier) summation.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    #[inline]
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub(crate) fn value(&self) -> f64 {
        self.sum + self.c
    }
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k as u64).fold(1u64, |acc, i| acc * (n as u64 - i) / (i + 1))
}

/// Shapley weight `|S|! (n-1-|S|)! / n!` of a coalition of size `s` not
/// containing the player, computed as `1 / (n · C(n-1, s))`.
pub fn shap_weight(n: usize, s: usize) -> Result<f64> {
    if n == 0 || n > DEFAULT_ENUMERATION_CAP {
        return Err(Error::TooManyGroups {
            n,
            cap: DEFAULT_ENUMERATION_CAP,
        });
    }
    if s >= n {
        return Err(Error::invalid(format!(
            "coalition size {s} out of range for {n} players"
        )));
    }
    Ok(1.0 / (n as f64 * binomial(n - 1, s) as f64))
}

fn weights(n: usize) -> Result<Vec<f64>> {
    (0..n).map(|s| shap_weight(n, s)).collect()
}

/// Partition of the groups into blocks for Owen values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoalitionStructure {
    n: usize,
    blocks: Vec<u32>,
}

impl CoalitionStructure {
    pub fn new(n: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        if n > 32 {
            return Err(Error::TooManyGroups { n, cap: 32 });
        }
        let mut seen = 0u32;
        let mut bits = Vec::with_capacity(blocks.len());
        for b in &blocks {
            if b.is_empty() {
                return Err(Error::invalid("empty block in coalition structure"));
            }
            let mut m = 0u32;
            for &g in b {
                if g >= n || (seen | m) >> g & 1 == 1 {
                    return Err(Error::invalid(format!("group {g} is out of range or repeated")));
                }
                m |= 1 << g;
            }
            seen |= m;
            bits.push(m);
        }
        if seen != GroupMask::full(n).bits() {
            return Err(Error::invalid("blocks do not cover every group"));
        }
        Ok(Self { n, blocks: bits })
    }

    pub fn singletons(n: usize) -> Self {
        Self::new(n, (0..n).map(|g| vec![g]).collect()).expect("singletons partition")
    }

    /// One block holding every past-day group, one block per covariate.
    pub fn day_block(schema: &FeatureSchema) -> Self {
        let days = schema.day_groups();
        let mut blocks = vec![(0..days).collect::<Vec<_>>()];
        blocks.extend((days..schema.n_groups()).map(|g| vec![g]));
        Self::new(schema.n_groups(), blocks).expect("day block partition")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| (0..self.n).filter(|g| b >> g & 1 == 1).collect())
            .collect()
    }

    pub fn is_singletons(&self) -> bool {
        self.blocks.iter().all(|b| b.count_ones() == 1)
    }

    /// Union of the blocks whose indices are set in `r`.
    fn union(&self, r: u32) -> u32 {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| r >> i & 1 == 1)
            .fold(0, |acc, (_, b)| acc | b)
    }
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|g| format!("g{g}")).collect()
}

fn finish(table: &CoalitionTable, acc: Vec<Vec<Kahan>>, mode: ExplanationMode) -> Result<Explanation> {
    let n = table.n_groups();
    Ok(Explanation {
        example_id: None,
        base_value: table.require(0)?.to_vec(),
        attributions: acc
            .into_iter()
            .map(|row| row.iter().map(Kahan::value).collect())
            .collect(),
        labels: labels(n),
        mode,
        elapsed_ms: 0.0,
        mask_count: table.len() as u64,
        model_calls: table.evaluations,
    })
}

/// Exact Shapley values of every group from a complete table.
pub fn exact_shap(table: &CoalitionTable) -> Result<Explanation> {
    let n = table.n_groups();
    if n == 0 {
        return Err(Error::invalid("table has no groups"));
    }
    if n > DEFAULT_ENUMERATION_CAP {
        return Err(Error::TooManyGroups {
            n,
            cap: DEFAULT_ENUMERATION_CAP,
        });
    }
    let h = table.horizon();
    let w = weights(n)?;
    let mut acc = vec![vec![Kahan::default(); h]; n];
    for s in 0..(1u32 << n) - 1 {
        let fs = table.require(s)?;
        let ws = w[s.count_ones() as usize];
        for (i, acc_i) in acc.iter_mut().enumerate() {
            if s >> i & 1 == 1 {
                continue;
            }
            let fsi = table.require(s | 1 << i)?;
            for ((a, x), y) in acc_i.iter_mut().zip(fsi).zip(fs) {
                a.add(ws * (x - y));
            }
        }
    }
    finish(table, acc, ExplanationMode::ExactShap)
}

/// Owen values for a coalition structure: blocks are first attributed as
/// players of the quotient game, then each block's value is split among its
/// members by a Shapley game played inside the block.
pub fn owen_values(table: &CoalitionTable, structure: &CoalitionStructure) -> Result<Explanation> {
    let n = table.n_groups();
    if structure.n() != n {
        return Err(Error::invalid("coalition structure does not match the table"));
    }
    if n > DEFAULT_ENUMERATION_CAP {
        return Err(Error::TooManyGroups {
            n,
            cap: DEFAULT_ENUMERATION_CAP,
        });
    }
    let h = table.horizon();
    let l = structure.blocks.len();
    let outer = weights(l)?;
    let mut acc = vec![vec![Kahan::default(); h]; n];
    for (k, &bk) in structure.blocks.iter().enumerate() {
        let size_k = bk.count_ones() as usize;
        let inner = weights(size_k)?;
        for i in 0..n {
            if bk >> i & 1 == 0 {
                continue;
            }
            let rest = bk & !(1 << i);
            for r in 0..1u32 << l {
                if r >> k & 1 == 1 {
                    continue;
                }
                let q = structure.union(r);
                let wr = outer[r.count_ones() as usize];
                // Every subset T of the rest of the block, including the empty one.
                let mut t = rest;
                loop {
                    let wt = wr * inner[t.count_ones() as usize];
                    let with = table.require(q | t | 1 << i)?;
                    let without = table.require(q | t)?;
                    for ((a, x), y) in acc[i].iter_mut().zip(with).zip(without) {
                        a.add(wt * (x - y));
                    }
                    if t == 0 {
                        break;
                    }
                    t = (t - 1) & rest;
                }
            }
        }
    }
    finish(table, acc, ExplanationMode::Owen)
}

/// Shapley values of the quotient game whose players are the blocks.
/// Returns one row per block, in block order.
pub fn quotient_shapley(table: &CoalitionTable, structure: &CoalitionStructure) -> Result<Vec<Vec<f64>>> {
    let l = structure.blocks.len();
    let mut q = CoalitionTable::new(l, table.horizon())?;
    for r in 0..1u32 << l {
        let values = table.require(structure.union(r))?.to_vec();
        q.insert(GroupMask::from_bits(r, l)?, values)?;
    }
    Ok(exact_shap(&q)?.attributions)
}

/// Average marginal contribution over all `n!` orderings. Test oracle.
pub fn brute_force_shapley(table: &CoalitionTable) -> Result<Explanation> {
    let n = table.n_groups();
    if n > 8 {
        return Err(Error::TooManyGroups { n, cap: 8 });
    }
    let h = table.horizon();
    let mut acc = vec![vec![Kahan::default(); h]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0u64;
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let visit = |perm: &[usize], acc: &mut Vec<Vec<Kahan>>| -> Result<()> {
        let mut s = 0u32;
        for &p in perm {
            let before = table.require(s)?;
            let after = table.require(s | 1 << p)?;
            for ((a, x), y) in acc[p].iter_mut().zip(after).zip(before) {
                a.add(x - y);
            }
            s |= 1 << p;
        }
        Ok(())
    };
    visit(&perm, &mut acc)?;
    count += 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm, &mut acc)?;
            count += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let scale = 1.0 / count as f64;
    let mut e = finish(table, acc, ExplanationMode::ExactShap)?;
    for row in &mut e.attributions {
        for v in row {
            *v *= scale;
        }
    }
    Ok(e)
}

/// Shapley estimate from sampled orderings. Each permutation is traversed
/// forwards (players added in order starting from nobody) and backwards
/// (players removed in order starting from everybody); `eval(k, present)`
/// values the coalition `present` during permutation `k` and is called
/// exactly `2n` times per permutation. The empty and full coalitions of one
/// permutation are shared by its two traversals.
///
/// Returns the base value (mean of the empty-coalition values) and the
/// per-player attributions.
pub fn permutation_attributions<F>(
    n: usize,
    horizon: usize,
    perms: &[Vec<usize>],
    mut eval: F,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(usize, &[bool]) -> Result<Vec<f64>>,
{
    if perms.is_empty() || n == 0 {
        return Err(Error::invalid("need at least one permutation and one player"));
    }
    let mut acc = vec![vec![Kahan::default(); horizon]; n];
    let mut base = vec![Kahan::default(); horizon];
    let mut present = vec![false; n];
    let check = |v: Vec<f64>| -> Result<Vec<f64>> {
        if v.len() != horizon {
            return Err(Error::invalid("coalition value has the wrong length"));
        }
        Ok(v)
    };
    for (k, perm) in perms.iter().enumerate() {
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the players"));
        }
        present.iter_mut().for_each(|p| *p = false);
        let mut forward = Vec::with_capacity(n);
        for &p in perm {
            present[p] = true;
            forward.push(check(eval(k, &present)?)?);
        }
        let mut backward = Vec::with_capacity(n);
        for &p in perm {
            present[p] = false;
            backward.push(check(eval(k, &present)?)?);
        }
        let empty = &backward[n - 1];
        let full = &forward[n - 1];
        for (b, v) in base.iter_mut().zip(empty) {
            b.add(*v);
        }
        for (j, &p) in perm.iter().enumerate() {
            let before_f = if j == 0 { empty } else { &forward[j - 1] };
            let before_b = if j == 0 { full } else { &backward[j - 1] };
            for t in 0..horizon {
                acc[p][t].add(forward[j][t] - before_f[t]);
                acc[p][t].add(before_b[t] - backward[j][t]);
            }
        }
    }
    let k = perms.len() as f64;
    Ok((
        base.iter().map(|b| b.value() / k).collect(),
        acc.iter()
            .map(|row| row.iter().map(|a| a.value() / (2.0 * k)).collect())
            .collect(),
    ))
}

/// All `2^n` masks in reflected Gray-code order; neighbours differ in one group.
pub fn gray_code_masks(n: usize) -> Result<Vec<GroupMask>> {
    (0..1u64 << n)
        .map(|i| GroupMask::from_bits((i ^ (i >> 1)) as u32, n))
        .collect()
}

/// Exact explanation of one forecast: evaluates the model on every coalition
/// and attributes with Owen values for `structure` (plain Shapley values when
/// every block is a singleton).
pub fn explain(example: &ForecastExample, params: &ModelParams, structure: &CoalitionStructure) -> Result<Explanation> {
    explain_with_cap(example, params, structure, DEFAULT_ENUMERATION_CAP)
}

pub fn explain_with_cap(
    example: &ForecastExample,
    params: &ModelParams,
    structure: &CoalitionStructure,
    cap: usize,
) -> Result<Explanation> {
    let schema = params.schema();
    let n = schema.n_groups();
    if n > cap.min(DEFAULT_ENUMERATION_CAP) {
        return Err(Error::TooManyGroups { n, cap });
    }
    let start = Instant::now();
    let masks = gray_code_masks(n)?;
    let table = batched_forward(example, &masks, params)?;
    let expected = 1u64 << n;
    if table.evaluations != expected || !table.is_complete() {
        return Err(Error::invalid(format!(
            "enumeration produced {} evaluations, expected {expected}",
            table.evaluations
        )));
    }
    let mut e = if structure.is_singletons() {
        exact_shap(&table)?
    } else {
        owen_values(&table, structure)?
    };
    e.labels = schema.group_labels();
    e.example_id = Some(example.id);
    e.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(e)
}
