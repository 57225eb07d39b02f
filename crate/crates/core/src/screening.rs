//! Early screening of runs: success labels, threshold rules over 10% checkpoint features,
//! recall-matched precision tables, hypergeometric enrichment and BH q-values.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;

use crate::envs::EnvId;
use crate::error::{contract, Result};
use crate::sweep::RunRecord;

pub const EARLY_FRACTION: f64 = 0.10;
pub const DEFAULT_TOP_FRACTION: f64 = 0.2;
pub const DEFAULT_MIN_SUPPORT: usize = 10;
pub const RECALL_BINS: usize = 6;
/// Quantile steps used for the bounds of the critic OUI band.
pub const BAND_LATTICE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EarlyFeatures {
    pub run_id: String,
    pub env_id: EnvId,
    pub seed: u64,
    pub early_return: Option<f64>,
    pub early_return_lso_percentile: Option<f64>,
    pub oui_actor_10: Option<f64>,
    pub oui_critic_10: Option<f64>,
    pub kl_10: Option<f64>,
    pub clip_10: Option<f64>,
    pub flip_10: Option<f64>,
}

/// Features at the 10% checkpoint. Runs that diverged before it keep all metrics missing,
/// so every predicate rejects them.
pub fn extract_features(records: &[RunRecord]) -> Vec<EarlyFeatures> {
    let mut feats: Vec<EarlyFeatures> = records
        .iter()
        .map(|r| {
            let c = r.checkpoint_at(EARLY_FRACTION);
            EarlyFeatures {
                run_id: r.run_id.clone(),
                env_id: r.env_id,
                seed: r.seed,
                early_return: c.and_then(|c| c.ret),
                early_return_lso_percentile: None,
                oui_actor_10: c.map(|c| c.oui_a),
                oui_critic_10: c.map(|c| c.oui_c),
                kl_10: c.map(|c| c.kl),
                clip_10: c.map(|c| c.clip),
                flip_10: c.map(|c| c.flip),
            }
        })
        .collect();
    let mut by_env: BTreeMap<EnvId, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for f in &feats {
        if let Some(v) = f.early_return {
            by_env.entry(f.env_id).or_default().entry(f.seed).or_default().push(v);
        }
    }
    for f in &mut feats {
        if let (Some(v), Some(pool)) = (f.early_return, by_env.get(&f.env_id)) {
            f.early_return_lso_percentile = leave_seed_out_percentile(pool, f.seed, v);
        }
    }
    feats
}

/// Midrank percentile of `value` among all values from seeds other than `target_seed`.
/// Missing when fewer than two seeds are present or no other value exists.
pub fn leave_seed_out_percentile(
    values_by_seed: &BTreeMap<u64, Vec<f64>>,
    target_seed: u64,
    value: f64,
) -> Option<f64> {
    if values_by_seed.len() < 2 {
        return None;
    }
    let (mut below, mut equal, mut total) = (0usize, 0usize, 0usize);
    for v in values_by_seed
        .iter()
        .filter(|(s, _)| **s != target_seed)
        .flat_map(|(_, v)| v)
    {
        total += 1;
        if *v < value {
            below += 1;
        } else if *v == value {
            equal += 1;
        }
    }
    (total > 0).then(|| (below as f64 + 0.5 * equal as f64) / total as f64)
}

/// Success flags aligned with `records`: per environment the `⌈top_fraction·N_env⌉` best
/// final returns among non-diverged runs, ties going to the smaller run_id.
pub fn label_success(records: &[RunRecord], top_fraction: f64) -> Vec<bool> {
    let mut success = vec![false; records.len()];
    let mut by_env: BTreeMap<EnvId, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_env.entry(r.env_id).or_default().push(i);
    }
    for members in by_env.values() {
        let quota = (top_fraction * members.len() as f64 - 1e-9).ceil().max(0.0) as usize;
        let mut eligible: Vec<(f64, &str, usize)> = members
            .iter()
            .filter_map(|&i| {
                let r = &records[i];
                match (r.diverged, r.final_return) {
                    (false, Some(v)) if v.is_finite() => Some((v, r.run_id.as_str(), i)),
                    _ => None,
                }
            })
            .collect();
        eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for &(_, _, i) in eligible.iter().take(quota) {
            success[i] = true;
        }
    }
    success
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RuleKind {
    ReturnOnly,
    Oui,
    Kl,
    Clip,
    Divergence,
    Flip,
    ReturnOui,
    ReturnKl,
    ReturnClip,
    ReturnDivergence,
    ReturnFlip,
}

impl RuleKind {
    pub const ALL: [RuleKind; 11] = [
        RuleKind::ReturnOnly,
        RuleKind::Oui,
        RuleKind::Kl,
        RuleKind::Clip,
        RuleKind::Divergence,
        RuleKind::Flip,
        RuleKind::ReturnOui,
        RuleKind::ReturnKl,
        RuleKind::ReturnClip,
        RuleKind::ReturnDivergence,
        RuleKind::ReturnFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::ReturnOnly => "ret",
            RuleKind::Oui => "oui",
            RuleKind::Kl => "kl",
            RuleKind::Clip => "clip",
            RuleKind::Divergence => "div",
            RuleKind::Flip => "flip",
            RuleKind::ReturnOui => "ret+oui",
            RuleKind::ReturnKl => "ret+kl",
            RuleKind::ReturnClip => "ret+clip",
            RuleKind::ReturnDivergence => "ret+div",
            RuleKind::ReturnFlip => "ret+flip",
        }
    }

    pub fn uses_return(self) -> bool {
        matches!(
            self,
            RuleKind::ReturnOnly
                | RuleKind::ReturnOui
                | RuleKind::ReturnKl
                | RuleKind::ReturnClip
                | RuleKind::ReturnDivergence
                | RuleKind::ReturnFlip
        )
    }

    /// The structural member of a conjunction (or the rule itself).
    pub fn base(self) -> RuleKind {
        match self {
            RuleKind::ReturnOui => RuleKind::Oui,
            RuleKind::ReturnKl => RuleKind::Kl,
            RuleKind::ReturnClip => RuleKind::Clip,
            RuleKind::ReturnDivergence => RuleKind::Divergence,
            RuleKind::ReturnFlip => RuleKind::Flip,
            k => k,
        }
    }

    fn required(self) -> Thresholds {
        let on = Some(0.0);
        let mut t = Thresholds::default();
        if self.uses_return() {
            t.ret = on;
        }
        match self.base() {
            RuleKind::Oui => {
                t.oui_actor = on;
                t.critic_band = Some((0.0, 0.0));
            }
            RuleKind::Kl => t.kl = on,
            RuleKind::Clip => t.clip = on,
            RuleKind::Divergence => {
                t.kl = on;
                t.clip = on;
            }
            RuleKind::Flip => t.flip = on,
            _ => {}
        }
        t
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Thresholds of a rule; unset fields impose no condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Thresholds {
    /// Minimum leave-seed-out percentile of the early return.
    pub ret: Option<f64>,
    pub oui_actor: Option<f64>,
    /// Inclusive critic OUI interval.
    pub critic_band: Option<(f64, f64)>,
    pub kl: Option<f64>,
    pub clip: Option<f64>,
    pub flip: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScreeningRule {
    kind: RuleKind,
    thresholds: Thresholds,
}

impl ScreeningRule {
    /// Fails unless exactly the thresholds of `kind` are set.
    pub fn new(kind: RuleKind, thresholds: Thresholds) -> Result<Self> {
        let r = kind.required();
        contract!(
            r.ret.is_some() == thresholds.ret.is_some()
                && r.oui_actor.is_some() == thresholds.oui_actor.is_some()
                && r.critic_band.is_some() == thresholds.critic_band.is_some()
                && r.kl.is_some() == thresholds.kl.is_some()
                && r.clip.is_some() == thresholds.clip.is_some()
                && r.flip.is_some() == thresholds.flip.is_some(),
            "thresholds {thresholds:?} do not fit rule {kind}"
        );
        Ok(Self { kind, thresholds })
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn thresholds(&self) -> &Thresholds {
        &self.thresholds
    }

    pub fn accepts(&self, f: &EarlyFeatures) -> bool {
        let t = &self.thresholds;
        let at_least = |v: Option<f64>, tau: Option<f64>| tau.map_or(true, |tau| v.is_some_and(|v| v >= tau));
        let at_most = |v: Option<f64>, tau: Option<f64>| tau.map_or(true, |tau| v.is_some_and(|v| v <= tau));
        at_least(f.early_return_lso_percentile, t.ret)
            && at_least(f.oui_actor_10, t.oui_actor)
            && t.critic_band
                .map_or(true, |(lo, hi)| f.oui_critic_10.is_some_and(|v| lo <= v && v <= hi))
            && at_most(f.kl_10, t.kl)
            && at_most(f.clip_10, t.clip)
            && at_most(f.flip_10, t.flip)
    }
}

pub fn apply_rule(rule: &ScreeningRule, features: &[EarlyFeatures]) -> Vec<bool> {
    features.iter().map(|f| rule.accepts(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RuleEvaluation {
    pub rule: ScreeningRule,
    pub selected_successes: usize,
    pub n_q: usize,
    pub total_successes: usize,
    pub total_runs: usize,
    pub precision: f64,
    pub recall: f64,
    pub p_value: f64,
    /// Set once the whole family of evaluations has been corrected.
    pub q_value: Option<f64>,
}

impl RuleEvaluation {
    fn new(rule: ScreeningRule, k: usize, n: usize, big_k: usize, big_n: usize, p_value: f64) -> Self {
        Self {
            rule,
            selected_successes: k,
            n_q: n,
            total_successes: big_k,
            total_runs: big_n,
            precision: if n == 0 { 0.0 } else { k as f64 / n as f64 },
            recall: if big_k == 0 { 0.0 } else { k as f64 / big_k as f64 },
            p_value,
            q_value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BitSet(Vec<u64>);

impl BitSet {
    fn from_fn(n: usize, f: impl Fn(usize) -> bool) -> Self {
        let mut words = vec![0u64; n.div_ceil(64)];
        for i in (0..n).filter(|&i| f(i)) {
            words[i / 64] |= 1 << (i % 64);
        }
        Self(words)
    }

    fn and(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a & b).collect())
    }

    fn count(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn count_and(&self, other: &Self) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

fn distinct(values: impl Iterator<Item = Option<f64>>) -> Vec<f64> {
    let mut v: Vec<f64> = values.flatten().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Distinct observed values at the `BAND_LATTICE + 1` evenly spaced ranks. Small corpora
/// therefore use every distinct value.
fn lattice(sorted_distinct: &[f64]) -> Vec<f64> {
    let m = sorted_distinct.len();
    if m == 0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = (0..=BAND_LATTICE)
        .map(|i| sorted_distinct[((i * (m - 1)) as f64 / BAND_LATTICE as f64).round() as usize])
        .collect();
    out.dedup();
    out
}

/// Precomputed single-predicate selections over a corpus.
struct Corpus {
    n: usize,
    success: BitSet,
    big_k: usize,
    ret: Vec<(f64, BitSet)>,
    oui_actor: Vec<(f64, BitSet)>,
    band: Vec<((f64, f64), BitSet)>,
    kl: Vec<(f64, BitSet)>,
    clip: Vec<(f64, BitSet)>,
    flip: Vec<(f64, BitSet)>,
}

impl Corpus {
    fn new(features: &[EarlyFeatures], successes: &[bool]) -> Result<Self> {
        contract!(
            features.len() == successes.len(),
            "features and success labels differ in length"
        );
        let n = features.len();
        let at_least = |get: fn(&EarlyFeatures) -> Option<f64>| -> Vec<(f64, BitSet)> {
            distinct(features.iter().map(get))
                .into_iter()
                .map(|tau| (tau, BitSet::from_fn(n, |i| get(&features[i]).is_some_and(|v| v >= tau))))
                .collect()
        };
        let at_most = |get: fn(&EarlyFeatures) -> Option<f64>| -> Vec<(f64, BitSet)> {
            distinct(features.iter().map(get))
                .into_iter()
                .map(|tau| (tau, BitSet::from_fn(n, |i| get(&features[i]).is_some_and(|v| v <= tau))))
                .collect()
        };
        let bounds = lattice(&distinct(features.iter().map(|f| f.oui_critic_10)));
        let mut band = Vec::new();
        for (a, &lo) in bounds.iter().enumerate() {
            for &hi in &bounds[a..] {
                let sel = BitSet::from_fn(n, |i| features[i].oui_critic_10.is_some_and(|v| lo <= v && v <= hi));
                band.push(((lo, hi), sel));
            }
        }
        let success = BitSet::from_fn(n, |i| successes[i]);
        Ok(Self {
            n,
            big_k: success.count(),
            success,
            ret: at_least(|f| f.early_return_lso_percentile),
            oui_actor: at_least(|f| f.oui_actor_10),
            band,
            kl: at_most(|f| f.kl_10),
            clip: at_most(|f| f.clip_10),
            flip: at_most(|f| f.flip_10),
        })
    }

    /// Calls `visit(thresholds, selection)` for every setting of the structural part of `base`.
    fn for_each_base(&self, base: RuleKind, visit: &mut dyn FnMut(Thresholds, &BitSet)) {
        let t0 = Thresholds::default();
        match base {
            RuleKind::Oui => {
                for (a, sa) in &self.oui_actor {
                    for (b, sb) in &self.band {
                        let t = Thresholds {
                            oui_actor: Some(*a),
                            critic_band: Some(*b),
                            ..t0
                        };
                        visit(t, &sa.and(sb));
                    }
                }
            }
            RuleKind::Kl => self
                .kl
                .iter()
                .for_each(|(v, s)| visit(Thresholds { kl: Some(*v), ..t0 }, s)),
            RuleKind::Clip => self
                .clip
                .iter()
                .for_each(|(v, s)| visit(Thresholds { clip: Some(*v), ..t0 }, s)),
            RuleKind::Flip => self
                .flip
                .iter()
                .for_each(|(v, s)| visit(Thresholds { flip: Some(*v), ..t0 }, s)),
            RuleKind::Divergence => {
                for (k, sk) in &self.kl {
                    for (c, sc) in &self.clip {
                        visit(
                            Thresholds {
                                kl: Some(*k),
                                clip: Some(*c),
                                ..t0
                            },
                            &sk.and(sc),
                        );
                    }
                }
            }
            _ => unreachable!("not a structural rule"),
        }
    }

    /// Streams `(rule, selected_successes, n_q)` for every threshold setting of `kind`.
    fn sweep(&self, kind: RuleKind, visit: &mut dyn FnMut(ScreeningRule, usize, usize)) {
        match (kind, kind.uses_return()) {
            (RuleKind::ReturnOnly, _) => {
                for (r, s) in &self.ret {
                    let rule = ScreeningRule {
                        kind,
                        thresholds: Thresholds {
                            ret: Some(*r),
                            ..Default::default()
                        },
                    };
                    visit(rule, s.count_and(&self.success), s.count());
                }
            }
            (_, false) => self.for_each_base(kind, &mut |t, s| {
                visit(
                    ScreeningRule { kind, thresholds: t },
                    s.count_and(&self.success),
                    s.count(),
                )
            }),
            (_, true) => self.for_each_base(kind.base(), &mut |t, s| {
                for (r, sr) in &self.ret {
                    let sel = s.and(sr);
                    let rule = ScreeningRule {
                        kind,
                        thresholds: Thresholds { ret: Some(*r), ..t },
                    };
                    visit(rule, sel.count_and(&self.success), sel.count());
                }
            }),
        }
    }
}

/// Every threshold setting of one rule family. Each parameter ranges over the distinct
/// observed values of its feature; the critic band bounds range over a 20-step quantile
/// lattice of the observed critic OUI values. q-values are left unset.
pub fn sweep_thresholds(kind: RuleKind, features: &[EarlyFeatures], successes: &[bool]) -> Result<Vec<RuleEvaluation>> {
    let corpus = Corpus::new(features, successes)?;
    let mut pvals = PValueCache::new(corpus.n, corpus.big_k);
    let mut out = Vec::new();
    corpus.sweep(kind, &mut |rule, k, n| {
        let p = pvals.get(n, k);
        out.push(RuleEvaluation::new(rule, k, n, corpus.big_k, corpus.n, p));
    });
    Ok(out)
}

struct PValueCache {
    big_n: usize,
    big_k: usize,
    cache: HashMap<(usize, usize), f64>,
}

impl PValueCache {
    fn new(big_n: usize, big_k: usize) -> Self {
        Self {
            big_n,
            big_k,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, n: usize, k: usize) -> f64 {
        let (big_n, big_k) = (self.big_n, self.big_k);
        *self
            .cache
            .entry((n, k))
            .or_insert_with(|| enrichment_pvalue(big_n, big_k, n, k).expect("counts come from a consistent corpus"))
    }
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact `P(X ≥ k)` for `X ~ Hypergeometric(N, K, n)`.
pub fn enrichment_pvalue_exact(big_n: usize, big_k: usize, n: usize, k: usize) -> Result<BigRational> {
    contract!(
        big_k <= big_n && n <= big_n && k <= n.min(big_k),
        "inconsistent counts N={big_n} K={big_k} n={n} k={k}"
    );
    let top = n.min(big_k);
    let mut num = BigUint::zero();
    for x in k..=top {
        num += binomial(big_k, x) * binomial(big_n - big_k, n - x);
    }
    Ok(BigRational::new(num.into(), binomial(big_n, n).into()))
}

pub fn enrichment_pvalue(big_n: usize, big_k: usize, n: usize, k: usize) -> Result<f64> {
    let p = enrichment_pvalue_exact(big_n, big_k, n, k)?;
    Ok(p.to_f64().unwrap_or(f64::NAN).clamp(0.0, 1.0))
}

/// Benjamini-Hochberg step-up q-values, in input order.
pub fn bh_fdr(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p_values[i] * (m as f64 / (rank + 1) as f64));
        q[i] = running.min(1.0);
    }
    q
}

/// BH over a multiset given as `(p, multiplicity)`. Returns the q-value of every distinct p,
/// equal to what [`bh_fdr`] assigns to each copy.
pub fn bh_fdr_grouped(groups: &[(f64, u64)]) -> Vec<(f64, f64)> {
    let mut merged: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    for &(p, c) in groups.iter().filter(|g| g.1 > 0) {
        // p ≥ 0, so the bit pattern orders like the value
        merged.entry(p.to_bits()).or_insert((p, 0)).1 += c;
    }
    let m: u64 = merged.values().map(|g| g.1).sum();
    let mut end = m;
    let mut running = f64::INFINITY;
    let mut out = Vec::with_capacity(merged.len());
    for &(p, c) in merged.values().rev() {
        running = running.min(p * (m as f64 / end as f64));
        out.push((p, running.min(1.0)));
        end -= c;
    }
    out.reverse();
    out
}

/// Which of the six recall bins `(i/20, (i+1)/20]` holds `k` of `K` successes.
pub fn recall_bin(k: usize, big_k: usize) -> Option<usize> {
    if big_k == 0 {
        return None;
    }
    (0..RECALL_BINS).find(|&i| i * big_k < 20 * k && 20 * k <= (i + 1) * big_k)
}

pub fn bin_label(bin: usize) -> String {
    format!("({:.2},{:.2}]", bin as f64 * 0.05, (bin + 1) as f64 * 0.05)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallBinTable {
    /// Best evaluation per (bin, rule family).
    pub cells: BTreeMap<(usize, RuleKind), RuleEvaluation>,
    /// Family holding the best cell of each bin.
    pub best: [Option<RuleKind>; RECALL_BINS],
    pub total_runs: usize,
    pub total_successes: usize,
    /// Number of evaluations in the multiple-testing family.
    pub family_size: u64,
    pub min_support: usize,
}

/// Strict improvement order inside a cell: precision (compared exactly), then n_q, then recall.
fn better(a: &RuleEvaluation, b: &RuleEvaluation) -> bool {
    let lhs = a.selected_successes as u128 * b.n_q as u128;
    let rhs = b.selected_successes as u128 * a.n_q as u128;
    if lhs != rhs {
        return lhs > rhs;
    }
    (a.n_q, a.selected_successes) > (b.n_q, b.selected_successes)
}

#[derive(Default)]
struct BinAccumulator {
    cells: BTreeMap<(usize, RuleKind), RuleEvaluation>,
    p_counts: HashMap<u64, (f64, u64)>,
    family_size: u64,
}

impl BinAccumulator {
    fn offer(&mut self, e: RuleEvaluation, min_support: usize) {
        self.family_size += 1;
        self.p_counts.entry(e.p_value.to_bits()).or_insert((e.p_value, 0)).1 += 1;
        if e.n_q < min_support {
            return;
        }
        let Some(bin) = recall_bin(e.selected_successes, e.total_successes) else {
            return;
        };
        match self.cells.get(&(bin, e.rule.kind)) {
            Some(cur) if !better(&e, cur) => {}
            _ => {
                self.cells.insert((bin, e.rule.kind), e);
            }
        }
    }

    fn finish(self, total_runs: usize, total_successes: usize, min_support: usize) -> RecallBinTable {
        let groups: Vec<(f64, u64)> = self.p_counts.into_values().collect();
        let q: HashMap<u64, f64> = bh_fdr_grouped(&groups)
            .into_iter()
            .map(|(p, q)| (p.to_bits(), q))
            .collect();
        let mut cells = self.cells;
        for e in cells.values_mut() {
            e.q_value = q.get(&e.p_value.to_bits()).copied();
        }
        let mut best = [None; RECALL_BINS];
        for (bin, slot) in best.iter_mut().enumerate() {
            let mut top: Option<&RuleEvaluation> = None;
            for kind in RuleKind::ALL {
                if let Some(e) = cells.get(&(bin, kind)) {
                    if top.map_or(true, |t| better(e, t)) {
                        top = Some(e);
                        *slot = Some(kind);
                    }
                }
            }
        }
        RecallBinTable {
            cells,
            best,
            total_runs,
            total_successes,
            family_size: self.family_size,
            min_support,
        }
    }
}

/// Bins evaluations by recall and keeps the most precise entry with `n_q ≥ min_support`
/// per (bin, family). q-values are computed over all given evaluations.
pub fn recall_match(evaluations: &[RuleEvaluation], min_support: usize) -> RecallBinTable {
    let mut acc = BinAccumulator::default();
    for e in evaluations {
        acc.offer(e.clone(), min_support);
    }
    let (n, k) = evaluations
        .first()
        .map_or((0, 0), |e| (e.total_runs, e.total_successes));
    acc.finish(n, k, min_support)
}

/// Full pipeline over all rule families without materializing the evaluations.
pub fn screen(features: &[EarlyFeatures], successes: &[bool], min_support: usize) -> Result<RecallBinTable> {
    let corpus = Corpus::new(features, successes)?;
    let mut pvals = PValueCache::new(corpus.n, corpus.big_k);
    let mut acc = BinAccumulator::default();
    for kind in RuleKind::ALL {
        corpus.sweep(kind, &mut |rule, k, n| {
            let p = pvals.get(n, k);
            acc.offer(RuleEvaluation::new(rule, k, n, corpus.big_k, corpus.n, p), min_support);
        });
    }
    Ok(acc.finish(corpus.n, corpus.big_k, min_support))
}

/// Visits every threshold setting of every family as `(rule, selected_successes, n_q)`.
pub fn for_each_evaluation(
    features: &[EarlyFeatures],
    successes: &[bool],
    mut visit: impl FnMut(&ScreeningRule, usize, usize),
) -> Result<()> {
    let corpus = Corpus::new(features, successes)?;
    for kind in RuleKind::ALL {
        corpus.sweep(kind, &mut |rule, k, n| visit(&rule, k, n));
    }
    Ok(())
}

impl RecallBinTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,rule,precision,recall,n_q,p,q\n");
        for ((bin, kind), e) in &self.cells {
            out.push_str(&format!(
                "\"{}\",{},{},{},{},{:e},{:e}\n",
                bin_label(*bin),
                kind,
                e.precision,
                e.recall,
                e.n_q,
                e.p_value,
                e.q_value.unwrap_or(f64::NAN)
            ));
        }
        out
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("## {title}\n\n");
        out.push_str(&format!(
            "{} runs, {} successes. Cells: precision / recall / n_Q (n_Q ≥ {}); best per bin in bold.\n\n",
            self.total_runs, self.total_successes, self.min_support
        ));
        out.push_str("| rule |");
        for b in 0..RECALL_BINS {
            out.push_str(&format!(" {} |", bin_label(b)));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(RECALL_BINS));
        out.push('\n');
        for kind in RuleKind::ALL {
            out.push_str(&format!("| {kind} |"));
            for b in 0..RECALL_BINS {
                match self.cells.get(&(b, kind)) {
                    None => out.push_str(" - |"),
                    Some(e) => {
                        let cell = format!("{:.3} / {:.3} / {}", e.precision, e.recall, e.n_q);
                        if self.best[b] == Some(kind) {
                            out.push_str(&format!(" **{cell}** |"));
                        } else {
                            out.push_str(&format!(" {cell} |"));
                        }
                    }
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "\np-values: one-sided hypergeometric enrichment test of successes among selected runs. \
             q-values: Benjamini-Hochberg over all {} threshold settings evaluated.\n",
            self.family_size
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(id: &str, seed: u64, pct: Option<f64>, a: f64, c: f64, kl: f64, clip: f64, flip: f64) -> EarlyFeatures {
        EarlyFeatures {
            run_id: id.into(),
            env_id: EnvId::CartPole,
            seed,
            early_return: pct,
            early_return_lso_percentile: pct,
            oui_actor_10: Some(a),
            oui_critic_10: Some(c),
            kl_10: Some(kl),
            clip_10: Some(clip),
            flip_10: Some(flip),
        }
    }

    #[test]
    fn lso_percentile_examples() {
        let mut pool = BTreeMap::new();
        pool.insert(0, vec![100.0]);
        pool.insert(1, vec![1.0, 2.0]);
        pool.insert(2, vec![3.0, 4.0]);
        assert_eq!(leave_seed_out_percentile(&pool, 0, 2.5), Some(0.5));
        assert_eq!(leave_seed_out_percentile(&pool, 0, 9.0), Some(1.0));
        let mut flat = BTreeMap::new();
        flat.insert(0, vec![5.0]);
        flat.insert(1, vec![5.0, 5.0]);
        assert_eq!(leave_seed_out_percentile(&flat, 0, 5.0), Some(0.5));
        let single: BTreeMap<u64, Vec<f64>> = [(0, vec![1.0, 2.0])].into_iter().collect();
        assert_eq!(leave_seed_out_percentile(&single, 0, 1.5), None);
    }

    #[test]
    fn pvalue_examples() {
        let p = enrichment_pvalue_exact(10, 3, 4, 2).unwrap();
        assert_eq!(p, BigRational::new(1.into(), 3.into()));
        assert_eq!(enrichment_pvalue(10, 3, 4, 0).unwrap(), 1.0);
        assert_eq!(enrichment_pvalue(5, 5, 5, 5).unwrap(), 1.0);
        assert!(enrichment_pvalue(10, 3, 4, 4).is_err());
        assert!(enrichment_pvalue(10, 11, 4, 1).is_err());
    }

    #[test]
    fn bh_examples() {
        let q = bh_fdr(&[0.001, 0.01, 0.04]);
        for (a, b) in q.iter().zip([0.003, 0.015, 0.04]) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(bh_fdr(&[0.2, 0.2, 0.2]), vec![0.2, 0.2, 0.2]);
        assert_eq!(bh_fdr(&[0.3]), vec![0.3]);
        assert_eq!(bh_fdr(&[0.04, 0.001, 0.01])[1], bh_fdr(&[0.001, 0.01, 0.04])[0]);
    }

    #[test]
    fn grouped_bh_matches_flat() {
        let p = [0.5, 0.01, 0.01, 0.2, 1.0, 0.03, 0.5, 0.01, 0.9];
        let flat = bh_fdr(&p);
        let mut groups: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
        for v in p {
            groups.entry(v.to_bits()).or_insert((v, 0)).1 += 1;
        }
        let grouped = bh_fdr_grouped(&groups.into_values().collect::<Vec<_>>());
        for (i, v) in p.iter().enumerate() {
            let q = grouped.iter().find(|g| g.0 == *v).unwrap().1;
            assert_eq!(q, flat[i]);
        }
    }

    #[test]
    fn recall_bins() {
        assert_eq!(recall_bin(1, 9), Some(2)); // 0.111
        assert_eq!(recall_bin(1, 20), Some(0));
        assert_eq!(recall_bin(2, 20), Some(1)); // exactly 0.10 closes the second bin
        assert_eq!(recall_bin(0, 20), None);
        assert_eq!(recall_bin(6, 20), Some(5));
        assert_eq!(recall_bin(7, 20), None);
        assert_eq!(bin_label(2), "(0.10,0.15]");
    }

    fn record(id: &str, ret: Option<f64>, diverged: bool) -> RunRecord {
        let mut r = RunRecord::new(
            EnvId::CartPole,
            crate::ppo::PpoConfig::for_env(EnvId::CartPole, 1e-3, 0),
        );
        r.run_id = id.into();
        r.final_return = ret;
        r.diverged = diverged;
        r
    }

    #[test]
    fn success_labels() {
        let runs: Vec<RunRecord> = (0..130)
            .map(|i| record(&format!("{i:03}"), Some(i as f64), false))
            .collect();
        assert_eq!(label_success(&runs, 0.2).iter().filter(|&&s| s).count(), 26);
        let dead: Vec<RunRecord> = (0..5).map(|i| record(&format!("{i}"), Some(1.0), true)).collect();
        assert!(label_success(&dead, 0.2).iter().all(|&s| !s));
        // quota 1 of 5 and a tie for the top return
        let tied = vec![
            record("b", Some(9.0), false),
            record("a", Some(9.0), false),
            record("c", Some(1.0), false),
            record("d", Some(1.0), false),
            record("e", Some(1.0), false),
        ];
        assert_eq!(label_success(&tied, 0.2), vec![false, true, false, false, false]);
    }

    #[test]
    fn rule_application() {
        let f = vec![
            feat("a", 0, Some(0.9), 0.5, 0.4, 0.01, 0.1, 0.2),
            feat("b", 1, Some(0.1), 0.7, 0.9, 0.05, 0.3, 0.1),
            feat("c", 2, None, 0.6, 0.5, 0.02, 0.2, 0.3),
        ];
        let all = ScreeningRule::new(
            RuleKind::ReturnOnly,
            Thresholds {
                ret: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(apply_rule(&all, &f), vec![true, true, false]);
        let band = |lo, hi| Thresholds {
            oui_actor: Some(0.0),
            critic_band: Some((lo, hi)),
            ..Default::default()
        };
        let empty = ScreeningRule::new(RuleKind::Oui, band(0.8, 0.2)).unwrap();
        assert_eq!(apply_rule(&empty, &f), vec![false; 3]);
        let mid = ScreeningRule::new(RuleKind::Oui, band(0.3, 0.6)).unwrap();
        assert_eq!(apply_rule(&mid, &f), vec![true, false, true]);
        let div = ScreeningRule::new(
            RuleKind::Divergence,
            Thresholds {
                kl: Some(0.03),
                clip: Some(0.15),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(apply_rule(&div, &f), vec![true, false, false]);
        assert!(ScreeningRule::new(RuleKind::Kl, Thresholds::default()).is_err());
        assert!(ScreeningRule::new(
            RuleKind::Kl,
            Thresholds {
                kl: Some(1.0),
                flip: Some(1.0),
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn counting_example() {
        // 10 runs, successes 0..3, flip rule selecting runs 0, 1, 5, 6
        let f: Vec<EarlyFeatures> = (0..10)
            .map(|i| {
                let flip = if [0, 1, 5, 6].contains(&i) { 0.1 } else { 0.9 };
                feat(&i.to_string(), i as u64, Some(0.5), 0.5, 0.5, 0.1, 0.1, flip)
            })
            .collect();
        let s: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let evals = sweep_thresholds(RuleKind::Flip, &f, &s).unwrap();
        let e = evals.iter().find(|e| e.rule.thresholds().flip == Some(0.1)).unwrap();
        assert_eq!((e.selected_successes, e.n_q, e.precision), (2, 4, 0.5));
        assert!((e.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((e.p_value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recall_match_selection() {
        let rule = ScreeningRule::new(
            RuleKind::Kl,
            Thresholds {
                kl: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        let mk = |k, n| RuleEvaluation::new(rule, k, n, 20, 100, 0.5);
        let t = recall_match(&[mk(2, 9), mk(2, 4 * 2 + 2), mk(2, 3 * 2 + 4)], 10);
        let cell = &t.cells[&(1, RuleKind::Kl)];
        assert_eq!(cell.n_q, 10);
        assert_eq!(t.best[1], Some(RuleKind::Kl));
        assert!(t.cells.get(&(0, RuleKind::Kl)).is_none());
        // 7/10 beats 6/10
        let t = recall_match(
            &[mk(6, 10), mk(6, 10), RuleEvaluation::new(rule, 6, 10, 20, 100, 0.1)],
            10,
        );
        assert_eq!(t.cells[&(5, RuleKind::Kl)].selected_successes, 6);
        let p6 = RuleEvaluation::new(rule, 3, 5 * 2, 60, 100, 0.5);
        let p7 = RuleEvaluation::new(rule, 7, 10, 60, 100, 0.5);
        assert_eq!(p6.recall, 0.05);
        let t = recall_match(&[RuleEvaluation::new(rule, 6, 10, 60, 100, 0.5), p7.clone()], 10);
        assert_eq!(t.cells[&(2, RuleKind::Kl)].precision, 0.7);
    }

    #[test]
    fn markdown_has_dashes_and_footer() {
        let t = recall_match(&[], 10);
        let md = t.to_markdown("empty");
        assert!(md.contains("| ret | - |"));
        assert!(md.contains("hypergeometric"));
    }
}
