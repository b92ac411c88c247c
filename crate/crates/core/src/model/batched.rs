use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;

use super::{finish, ModelParams};
use crate::error::{Error, Result};
use crate::numkernel::{Eager, Tensor};
use crate::schema::{ForecastExample, GroupMask, STEPS_PER_DAY};
use crate::shapley::CoalitionTable;

/// Predictions for many coalitions of one example.
///
/// Masks sharing the same covariate subset share the embedding of all past
/// rows, the first encoder layer's projections and the first decoder layer's
/// self-attention. Every entry is bit-identical to
/// [`ModelParams::forward_pruned`] for that mask.
pub fn batched_forward(example: &ForecastExample, masks: &[GroupMask], params: &ModelParams) -> Result<CoalitionTable> {
    let schema = params.schema();
    let n = schema.n_groups();
    if masks.is_empty() {
        return Err(Error::invalid("batched_forward needs at least one mask"));
    }
    let mut seen = HashSet::with_capacity(masks.len());
    for m in masks {
        if m.n() != n {
            return Err(Error::invalid(format!("mask has {} groups, schema has {n}", m.n())));
        }
        if !seen.insert(m.bits()) {
            return Err(Error::invalid(format!("duplicate mask {m:?}")));
        }
    }
    let days = schema.day_groups();
    let day_bits = (1u32 << days) - 1;
    let mut groups: BTreeMap<u32, Vec<GroupMask>> = BTreeMap::new();
    for m in masks {
        groups.entry(m.bits() & !day_bits).or_default().push(*m);
    }
    let groups: Vec<(u32, Vec<GroupMask>)> = groups.into_iter().collect();
    let results = groups
        .par_iter()
        .map(|(cov_bits, members)| share_covariates(params, example, *cov_bits >> days, members))
        .collect::<Result<Vec<_>>>()?;

    let mut table = CoalitionTable::new(n, schema.horizon())?;
    for (mask, values) in results.into_iter().flatten() {
        table.insert(mask, values)?;
        table.evaluations += 1;
    }
    Ok(table)
}

fn share_covariates(
    params: &ModelParams,
    ex: &ForecastExample,
    cov_bits: u32,
    members: &[GroupMask],
) -> Result<Vec<(GroupMask, Vec<f64>)>> {
    let schema = params.schema();
    let e = &mut Eager;
    let covs: Vec<usize> = (0..schema.covariates().len())
        .filter(|c| cov_bits >> c & 1 == 1)
        .collect();
    let all_rows: Vec<usize> = (0..schema.lookback()).collect();
    let days = schema.day_groups();
    let needs_encoder = members.iter().any(|m| m.bits() & ((1 << days) - 1) != 0);

    let enc_prefix = if needs_encoder {
        let present = vec![true; covs.len() + 1];
        let x = params.encoder_input(e, ex, &all_rows, &covs, &present)?;
        let qkv = params.project_qkv(e, &x, &params.ids.enc[0].attn)?;
        Some((x, qkv))
    } else {
        None
    };
    let first = &params.ids.dec[0];
    let y = params.decoder_input(e, ex, &covs, &vec![true; covs.len()])?;
    let y = params.decoder_self(e, first, y)?;
    let cross_q = if needs_encoder {
        Some(params.linear(e, &y, &first.cross.q)?)
    } else {
        None
    };

    let select = |t: &Arc<Tensor>, rows: &[usize]| Arc::new(t.select_rows(rows));
    let mut out = Vec::with_capacity(members.len());
    for m in members {
        let rows: Vec<usize> = all_rows
            .iter()
            .copied()
            .filter(|t| m.contains(t / STEPS_PER_DAY))
            .collect();
        let out_y = match (&enc_prefix, rows.is_empty()) {
            (Some((x, [q, k, v])), false) => {
                let qkv = [select(q, &rows), select(k, &rows), select(v, &rows)];
                let enc = params.encoder_from(e, 0, select(x, &rows), Some(qkv), None)?;
                params.decoder_rest(e, 0, y.clone(), cross_q.clone(), Some(&enc), None)?
            }
            _ => params.decoder_rest(e, 0, y.clone(), None, None, None)?,
        };
        let pred = params.head(e, &out_y)?;
        out.push((*m, finish(&pred)?));
    }
    Ok(out)
}
