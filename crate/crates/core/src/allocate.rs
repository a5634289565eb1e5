//! Head-to-GPU placement.
//!
//! For one layer, every replication scheme is split into `tp` GPU groups and
//! scored by the spread between the heaviest and lightest group, where each
//! copy of head `i` carries `w_i / r_i`. The layer keeps the scheme and
//! grouping with the smallest spread.
//!
//! Groupings are handled in canonical form: each group is the sorted list of
//! head ids it hosts, and the groups themselves are sorted. GPU `j` of a
//! layer is the `j`-th canonical group.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enumerate::{
    enumerate_schemes, EnumerationConfig, EnumerationError, ReplicationScheme, DEFAULT_MAX_SCHEMES,
};
use crate::profile::ModelProfile;

/// Largest copy count the exhaustive oracle accepts.
pub const BRUTE_FORCE_MAX_COPIES: usize = 12;

pub const DEFAULT_NODE_BUDGET: u64 = 200_000;

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("layer {layer}: {cause}")]
    Layer { layer: usize, cause: Box<AllocationError> },
    #[error("instance too large for exhaustive search ({copies} copies > {limit})")]
    InstanceTooLarge { copies: usize, limit: usize },
    #[error(transparent)]
    Enumeration(#[from] EnumerationError),
    #[error("plan does not match profile: {0}")]
    Mismatch(String),
    #[error("all GPU loads are zero")]
    ZeroLoad,
}

/// One placed copy of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadCopy {
    pub head: usize,
    /// Total copies of this head in the layer.
    pub replicas: usize,
}

/// Head ids per group, canonical order.
pub type Grouping = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerAssignment {
    pub groups: Vec<Vec<HeadCopy>>,
    pub delta: f64,
    /// False when the search stopped on its node budget and `delta` is the
    /// best found rather than a proven minimum.
    #[serde(default = "yes")]
    pub exhaustive: bool,
}

fn yes() -> bool {
    true
}

impl LayerAssignment {
    fn from_grouping(grouping: &Grouping, replicas: &[usize], delta: f64, exhaustive: bool) -> Self {
        let groups = grouping
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&head| HeadCopy {
                        head,
                        replicas: replicas[head],
                    })
                    .collect()
            })
            .collect();
        Self {
            groups,
            delta,
            exhaustive,
        }
    }

    pub fn tp(&self) -> usize {
        self.groups.len()
    }

    pub fn grouping(&self) -> Grouping {
        self.groups.iter().map(|g| g.iter().map(|c| c.head).collect()).collect()
    }

    /// Replica count per head, recovered from the placement.
    pub fn replicas(&self, n: usize) -> Vec<usize> {
        let mut r = vec![0; n];
        for copy in self.groups.iter().flatten() {
            if copy.head < n {
                r[copy.head] += 1;
            }
        }
        r
    }

    pub fn total_copies(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Adjusted load carried by each group.
    pub fn group_loads(&self, weights: &[f64]) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|c| adjusted(weights[c.head], c.replicas)).sum())
            .collect()
    }

    /// Checks the structural invariants against a layer of `n` heads.
    pub fn validate(&self, n: usize, tp: usize, equal_split: bool) -> Result<(), AllocationError> {
        let bad = |msg: String| Err(AllocationError::Mismatch(msg));
        if self.groups.len() != tp {
            return bad(format!("{} groups, expected {tp}", self.groups.len()));
        }
        let counts = self.replicas(n);
        for copy in self.groups.iter().flatten() {
            if copy.head >= n {
                return bad(format!("head {} out of range", copy.head));
            }
            if copy.replicas != counts[copy.head] {
                return bad(format!(
                    "head {} declares {} replicas but is placed {} times",
                    copy.head, copy.replicas, counts[copy.head]
                ));
            }
        }
        if let Some(head) = counts.iter().position(|&c| c == 0) {
            return bad(format!("head {head} is not placed"));
        }
        for (j, g) in self.groups.iter().enumerate() {
            let mut ids: Vec<usize> = g.iter().map(|c| c.head).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return bad(format!("group {j} holds two copies of one head"));
            }
        }
        if equal_split && self.groups.windows(2).any(|w| w[0].len() != w[1].len()) {
            return bad("groups differ in size".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationPlan {
    pub tp: usize,
    pub ch_budget: usize,
    pub r_max: usize,
    #[serde(default = "yes")]
    pub equal_split: bool,
    pub layers: Vec<LayerAssignment>,
}

impl AllocationPlan {
    pub fn deltas(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.delta).collect()
    }

    pub fn validate(&self, profile: &ModelProfile) -> Result<(), AllocationError> {
        if self.layers.len() != profile.num_layers {
            return Err(AllocationError::Mismatch(format!(
                "plan has {} layers, profile has {}",
                self.layers.len(),
                profile.num_layers
            )));
        }
        for (layer, assignment) in self.layers.iter().enumerate() {
            assignment
                .validate(profile.heads_per_layer, self.tp, self.equal_split)
                .map_err(|e| AllocationError::Layer {
                    layer,
                    cause: Box::new(e),
                })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("plan serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Search settings for [`select_best`] and [`optimize_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationConfig {
    pub ch_budget: usize,
    pub r_max: usize,
    /// Every GPU hosts the same number of head copies.
    pub equal_split: bool,
    pub max_schemes: usize,
    /// Search nodes allowed for the unreplicated scheme, and again for all
    /// replicated schemes together.
    pub node_budget: u64,
}

impl AllocationConfig {
    pub fn new(ch_budget: usize, r_max: usize) -> Self {
        Self {
            ch_budget,
            r_max,
            equal_split: true,
            max_schemes: DEFAULT_MAX_SCHEMES,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }

    /// No replication: pure head rearrangement.
    pub fn no_replication() -> Self {
        Self::new(0, 1)
    }

    pub fn relaxed(mut self) -> Self {
        self.equal_split = false;
        self
    }

    pub fn enumeration(&self, tp: usize) -> EnumerationConfig {
        EnumerationConfig {
            ch_budget: self.ch_budget,
            r_max: self.r_max,
            require_divisible: self.equal_split,
            tp,
            max_schemes: self.max_schemes,
        }
    }
}

fn adjusted(weight: f64, replicas: usize) -> f64 {
    weight / replicas as f64
}

/// Weight of every copy, heads in order and copies of one head adjacent.
pub fn adjusted_weights(scheme: &ReplicationScheme, layer_weights: &[f64]) -> Vec<f64> {
    assert_eq!(
        scheme.heads(),
        layer_weights.len(),
        "scheme and weights differ in length"
    );
    scheme
        .replicas
        .iter()
        .zip(layer_weights)
        .flat_map(|(&r, &w)| std::iter::repeat_n(adjusted(w, r), r))
        .collect()
}

/// The copies a scheme produces, in head order.
pub fn expand_copies(scheme: &ReplicationScheme) -> Vec<HeadCopy> {
    scheme
        .replicas
        .iter()
        .enumerate()
        .flat_map(|(head, &replicas)| std::iter::repeat_n(HeadCopy { head, replicas }, replicas))
        .collect()
}

/// Max minus min of a set of loads.
pub fn spread(loads: &[f64]) -> f64 {
    let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
    if loads.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Summed load per group; `head_weights[i]` is the adjusted weight of one copy
/// of head `i`. Each group is summed in its stored order.
pub fn group_loads(grouping: &[Vec<usize>], head_weights: &[f64]) -> Vec<f64> {
    grouping
        .iter()
        .map(|g| g.iter().map(|&h| head_weights[h]).sum())
        .collect()
}

/// Spread of the group loads of a grouping.
pub fn imbalance(grouping: &[Vec<usize>], head_weights: &[f64]) -> f64 {
    spread(&group_loads(grouping, head_weights))
}

fn canonicalize(mut grouping: Grouping) -> Grouping {
    for g in &mut grouping {
        g.sort_unstable();
    }
    grouping.sort();
    grouping
}

fn per_head_adjusted(weights: &[f64], replicas: &[usize]) -> Vec<f64> {
    weights.iter().zip(replicas).map(|(&w, &r)| adjusted(w, r)).collect()
}

/// Candidate ordering: smaller spread, then fewer copies, then the
/// lexicographically smaller canonical grouping.
#[derive(Debug, Clone)]
struct Candidate {
    delta: f64,
    copies: usize,
    grouping: Grouping,
    replicas: Vec<usize>,
}

impl Candidate {
    fn better_than(&self, other: &Candidate) -> bool {
        self.cmp_key(other) == Ordering::Less
    }

    fn cmp_key(&self, other: &Candidate) -> Ordering {
        self.delta
            .total_cmp(&other.delta)
            .then(self.copies.cmp(&other.copies))
            .then_with(|| self.grouping.cmp(&other.grouping))
    }

    fn into_assignment(self, exhaustive: bool) -> LayerAssignment {
        LayerAssignment::from_grouping(&self.grouping, &self.replicas, self.delta, exhaustive)
    }
}

fn evaluate(grouping: Grouping, weights: &[f64], replicas: &[usize]) -> Candidate {
    let grouping = canonicalize(grouping);
    let delta = imbalance(&grouping, &per_head_adjusted(weights, replicas));
    Candidate {
        delta,
        copies: replicas.iter().sum(),
        grouping,
        replicas: replicas.to_vec(),
    }
}

fn check_split(replicas: &[usize], tp: usize, equal_split: bool) -> Result<usize, AllocationError> {
    if tp == 0 {
        return Err(AllocationError::Infeasible("tp must be at least 1".into()));
    }
    let total: usize = replicas.iter().sum();
    if let Some(head) = replicas.iter().position(|&r| r > tp) {
        return Err(AllocationError::Infeasible(format!(
            "head {head} has {} copies but only {tp} GPUs",
            replicas[head]
        )));
    }
    if equal_split && !total.is_multiple_of(tp) {
        return Err(AllocationError::Infeasible(format!(
            "{total} copies cannot be split evenly over {tp} GPUs"
        )));
    }
    Ok(if equal_split { total / tp } else { usize::MAX })
}

// ---------------------------------------------------------------------------
// Grouping search
// ---------------------------------------------------------------------------

/// Depth-first placement of heads into unlabeled groups.
///
/// Groups whose contents are identical so far form a class; a head is placed
/// into the first `c` groups of a class, never into a later one, so each
/// unlabeled grouping is reached exactly once.
struct GroupSearch<'a> {
    order: Vec<usize>,
    replicas: &'a [usize],
    copy_weight: Vec<f64>,
    capacity: usize,
    tp: usize,
    groups: Vec<Vec<usize>>,
    sums: Vec<f64>,
    // Remaining copy weights after depth d, descending, as prefix sums.
    rest_desc_prefix: Vec<Vec<f64>>,
    rest_asc_prefix: Vec<Vec<f64>>,
    mean_load: f64,
    nodes: u64,
    node_limit: u64,
    exhausted: bool,
}

impl<'a> GroupSearch<'a> {
    fn new(weights: &[f64], replicas: &'a [usize], tp: usize, capacity: usize, order: Vec<usize>) -> Self {
        let copy_weight = per_head_adjusted(weights, replicas);
        let n = order.len();
        let mut rest_desc_prefix = Vec::with_capacity(n + 1);
        let mut rest_asc_prefix = Vec::with_capacity(n + 1);
        for depth in 0..=n {
            let mut rest: Vec<f64> = order[depth..]
                .iter()
                .flat_map(|&h| std::iter::repeat_n(copy_weight[h], replicas[h]))
                .collect();
            rest.sort_by(|a, b| b.total_cmp(a));
            rest_desc_prefix.push(prefix_sums(&rest));
            rest.reverse();
            rest_asc_prefix.push(prefix_sums(&rest));
        }
        let total: f64 = weights.iter().sum();
        Self {
            order,
            replicas,
            copy_weight,
            capacity,
            tp,
            groups: vec![Vec::new(); tp],
            sums: vec![0.0; tp],
            rest_desc_prefix,
            rest_asc_prefix,
            mean_load: total / tp as f64,
            nodes: 0,
            node_limit: u64::MAX,
            exhausted: false,
        }
    }

    /// Lower bound on the final spread of any completion of the current
    /// partial grouping.
    fn spread_lower_bound(&self, depth: usize) -> f64 {
        let desc = &self.rest_desc_prefix[depth];
        let asc = &self.rest_asc_prefix[depth];
        let remaining = desc.len() - 1;
        let mut max_lb = self.mean_load;
        let mut min_ub = self.mean_load;
        for (g, &sum) in self.sums.iter().enumerate() {
            let (lo, hi) = if self.capacity == usize::MAX {
                (sum, sum + desc[remaining])
            } else {
                let need = (self.capacity - self.groups[g].len()).min(remaining);
                (sum + asc[need], sum + desc[need])
            };
            max_lb = max_lb.max(lo);
            min_ub = min_ub.min(hi);
        }
        max_lb - min_ub
    }

    fn run<F>(&mut self, prune_above: &mut dyn FnMut() -> f64, leaf: &mut F)
    where
        F: FnMut(&Grouping),
    {
        let classes = vec![0usize; self.tp];
        self.descend(0, &classes, prune_above, leaf);
    }

    fn descend<F>(&mut self, depth: usize, classes: &[usize], prune_above: &mut dyn FnMut() -> f64, leaf: &mut F)
    where
        F: FnMut(&Grouping),
    {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.node_limit {
            self.exhausted = true;
            return;
        }
        if depth > 0 && self.spread_lower_bound(depth) > prune_above() {
            return;
        }
        if depth == self.order.len() {
            leaf(&self.groups);
            return;
        }
        let head = self.order[depth];
        let r = self.replicas[head];

        // Class representatives: groups listed by class, lightest class first.
        let mut class_members: Vec<(usize, Vec<usize>)> = Vec::new();
        for (g, &c) in classes.iter().enumerate() {
            match class_members.iter_mut().find(|(id, _)| *id == c) {
                Some((_, members)) => members.push(g),
                None => class_members.push((c, vec![g])),
            }
        }
        class_members.sort_by(|a, b| {
            self.sums[a.1[0]]
                .total_cmp(&self.sums[b.1[0]])
                .then(a.1[0].cmp(&b.1[0]))
        });
        let usable: Vec<usize> = class_members
            .iter()
            .map(|(_, m)| {
                if self.groups[m[0]].len() < self.capacity {
                    m.len()
                } else {
                    0
                }
            })
            .collect();

        let mut take = vec![0usize; class_members.len()];
        self.choose(
            depth,
            head,
            r,
            0,
            &class_members,
            &usable,
            &mut take,
            classes,
            prune_above,
            leaf,
        );
    }

    #[allow(clippy::too_many_arguments)]
    fn choose<F>(
        &mut self,
        depth: usize,
        head: usize,
        left: usize,
        class_idx: usize,
        class_members: &[(usize, Vec<usize>)],
        usable: &[usize],
        take: &mut Vec<usize>,
        classes: &[usize],
        prune_above: &mut dyn FnMut() -> f64,
        leaf: &mut F,
    ) where
        F: FnMut(&Grouping),
    {
        if self.exhausted {
            return;
        }
        if left == 0 {
            // Apply: the first `take[k]` members of class k receive the head
            // and become a new class.
            let mut next = classes.to_vec();
            let mut fresh = classes.iter().copied().max().unwrap_or(0) + 1;
            let w = self.copy_weight[head];
            for (k, (_, members)) in class_members.iter().enumerate() {
                for &g in &members[..take[k]] {
                    self.groups[g].push(head);
                    self.sums[g] += w;
                    next[g] = fresh;
                }
                if take[k] > 0 {
                    fresh += 1;
                }
            }
            self.descend(depth + 1, &next, prune_above, leaf);
            for (k, (_, members)) in class_members.iter().enumerate() {
                for &g in &members[..take[k]] {
                    self.groups[g].pop();
                    self.sums[g] -= w;
                }
            }
            return;
        }
        if class_idx == class_members.len() {
            return;
        }
        let later: usize = usable[class_idx + 1..].iter().sum();
        let hi = usable[class_idx].min(left);
        let lo = left.saturating_sub(later);
        for c in (lo..=hi).rev() {
            take[class_idx] = c;
            self.choose(
                depth,
                head,
                left - c,
                class_idx + 1,
                class_members,
                usable,
                take,
                classes,
                prune_above,
                leaf,
            );
            if self.exhausted {
                break;
            }
        }
        take[class_idx] = 0;
    }
}

fn prefix_sums(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

/// Every grouping of `copies` into `tp` unlabeled groups such that no group
/// holds two copies of one head (and, with `equal_split`, all groups hold the
/// same number of copies). Each grouping is yielded once, in canonical form.
pub fn split_into_groups(
    copies: &[HeadCopy],
    tp: usize,
    equal_split: bool,
) -> Result<std::vec::IntoIter<Grouping>, AllocationError> {
    let n = copies.iter().map(|c| c.head + 1).max().unwrap_or(0);
    let mut replicas = vec![0usize; n];
    for c in copies {
        replicas[c.head] += 1;
    }
    if let Some(c) = copies.iter().find(|c| c.replicas != replicas[c.head]) {
        return Err(AllocationError::Mismatch(format!(
            "head {} declares {} replicas, {} copies given",
            c.head, c.replicas, replicas[c.head]
        )));
    }
    let capacity = check_split(&replicas, tp, equal_split)?;
    let heads: Vec<usize> = (0..n).filter(|&h| replicas[h] > 0).collect();
    let weights = vec![0.0; n];
    let mut search = GroupSearch::new(&weights, &replicas, tp, capacity, heads);
    let mut out = Vec::new();
    search.run(&mut || f64::INFINITY, &mut |g: &Grouping| {
        out.push(canonicalize(g.clone()));
    });
    Ok(out.into_iter())
}

// ---------------------------------------------------------------------------
// Heuristic seeds
// ---------------------------------------------------------------------------

/// Heaviest copy first onto the lightest group that can take it.
fn greedy_grouping(weights: &[f64], replicas: &[usize], tp: usize, capacity: usize) -> Option<Grouping> {
    let copy_weight = per_head_adjusted(weights, replicas);
    let mut heads: Vec<usize> = (0..replicas.len()).collect();
    heads.sort_by(|&a, &b| copy_weight[b].total_cmp(&copy_weight[a]).then(a.cmp(&b)));
    let mut groups: Grouping = vec![Vec::new(); tp];
    let mut sums = vec![0.0f64; tp];
    for &h in &heads {
        for _ in 0..replicas[h] {
            let target = (0..tp)
                .filter(|&g| groups[g].len() < capacity && !groups[g].contains(&h))
                .min_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)))?;
            groups[target].push(h);
            sums[target] += copy_weight[h];
        }
    }
    Some(groups)
}

/// Copies laid out head by head and dealt round-robin. Always valid when
/// every `r_i <= tp`.
fn round_robin_grouping(replicas: &[usize], tp: usize) -> Grouping {
    let mut groups: Grouping = vec![Vec::new(); tp];
    let mut slot = 0;
    for (h, &r) in replicas.iter().enumerate() {
        for _ in 0..r {
            groups[slot % tp].push(h);
            slot += 1;
        }
    }
    groups
}

/// Moves and swaps between the heaviest or lightest group and any other
/// group, first improvement, while the spread shrinks.
fn improve_by_swaps(mut grouping: Grouping, weights: &[f64], replicas: &[usize], allow_moves: bool) -> Grouping {
    let copy_weight = per_head_adjusted(weights, replicas);
    let tp = grouping.len();
    let mut sums = group_loads(&grouping, &copy_weight);
    let spread_with = |sums: &[f64], a: usize, b: usize, da: f64, db: f64| {
        let mut max = f64::NEG_INFINITY;
        let mut min = f64::INFINITY;
        for (g, &s) in sums.iter().enumerate() {
            let v = if g == a {
                s + da
            } else if g == b {
                s + db
            } else {
                s
            };
            max = max.max(v);
            min = min.min(v);
        }
        max - min
    };
    for _ in 0..256 {
        let current = spread(&sums);
        let heaviest = (0..tp)
            .max_by(|&x, &y| sums[x].total_cmp(&sums[y]).then(y.cmp(&x)))
            .unwrap_or(0);
        let lightest = (0..tp)
            .min_by(|&x, &y| sums[x].total_cmp(&sums[y]).then(x.cmp(&y)))
            .unwrap_or(0);
        let mut step: Option<(usize, usize, usize, Option<usize>)> = None;
        'search: for a in [heaviest, lightest] {
            for b in (0..tp).filter(|&b| b != a) {
                for (i, &ha) in grouping[a].iter().enumerate() {
                    if grouping[b].contains(&ha) {
                        continue;
                    }
                    let wa = copy_weight[ha];
                    if allow_moves && spread_with(&sums, a, b, -wa, wa) < current {
                        step = Some((a, b, i, None));
                        break 'search;
                    }
                    for (k, &hb) in grouping[b].iter().enumerate() {
                        if grouping[a].contains(&hb) {
                            continue;
                        }
                        let d = copy_weight[hb] - wa;
                        if spread_with(&sums, a, b, d, -d) < current {
                            step = Some((a, b, i, Some(k)));
                            break 'search;
                        }
                    }
                }
            }
        }
        let Some((a, b, i, swap)) = step else { break };
        let ha = grouping[a][i];
        match swap {
            None => {
                grouping[a].remove(i);
                grouping[b].push(ha);
            }
            Some(k) => {
                let hb = grouping[b][k];
                grouping[a][i] = hb;
                grouping[b][k] = ha;
            }
        }
        // Recompute rather than accumulate so drift cannot mislead the loop.
        sums = group_loads(&grouping, &copy_weight);
    }
    grouping
}

fn heuristic_candidate(
    weights: &[f64],
    replicas: &[usize],
    tp: usize,
    capacity: usize,
    equal_split: bool,
) -> Candidate {
    let start = greedy_grouping(weights, replicas, tp, capacity).unwrap_or_else(|| round_robin_grouping(replicas, tp));
    let improved = improve_by_swaps(start, weights, replicas, !equal_split);
    evaluate(improved, weights, replicas)
}

/// Contiguous equal blocks of heads, no replication.
fn contiguous_grouping(n: usize, tp: usize) -> Grouping {
    let block = n / tp;
    (0..tp).map(|g| (g * block..(g + 1) * block).collect()).collect()
}

// ---------------------------------------------------------------------------
// Exact search
// ---------------------------------------------------------------------------

fn search_scheme(
    weights: &[f64],
    replicas: &[usize],
    tp: usize,
    capacity: usize,
    best: &mut Candidate,
    nodes_left: &mut u64,
) -> bool {
    let copy_weight = per_head_adjusted(weights, replicas);
    let mut order: Vec<usize> = (0..replicas.len()).collect();
    order.sort_by(|&a, &b| {
        (copy_weight[b] * replicas[b] as f64)
            .total_cmp(&(copy_weight[a] * replicas[a] as f64))
            .then(replicas[b].cmp(&replicas[a]))
            .then(a.cmp(&b))
    });
    let total: f64 = weights.iter().sum();
    let slack = 1e-9 * total.abs().max(f64::MIN_POSITIVE);

    let mut search = GroupSearch::new(weights, replicas, tp, capacity, order);
    search.node_limit = *nodes_left;
    // The bound is read through a cell so the leaf closure can lower it.
    let best_cell = std::cell::RefCell::new(std::mem::replace(
        best,
        Candidate {
            delta: 0.0,
            copies: 0,
            grouping: Vec::new(),
            replicas: Vec::new(),
        },
    ));
    {
        let mut prune = || best_cell.borrow().delta + slack;
        let mut leaf = |g: &Grouping| {
            let candidate = evaluate(g.clone(), weights, replicas);
            let mut b = best_cell.borrow_mut();
            if candidate.better_than(&b) {
                *b = candidate;
            }
        };
        search.run(&mut prune, &mut leaf);
    }
    *best = best_cell.into_inner();
    *nodes_left = nodes_left.saturating_sub(search.nodes);
    !search.exhausted
}

/// Best scheme and grouping for one layer.
///
/// Exhaustive over every replication scheme allowed by `cfg` and every valid
/// grouping, with branch-and-bound pruning. Ties go to fewer copies, then to
/// the smaller canonical grouping. The unreplicated scheme is searched first
/// with its own node budget, so enabling replication never returns a worse
/// layer than running without it. If a budget runs out the best grouping
/// found so far is returned with `exhaustive == false`.
pub fn select_best(
    layer_weights: &[f64],
    tp: usize,
    cfg: &AllocationConfig,
) -> Result<LayerAssignment, AllocationError> {
    let n = layer_weights.len();
    if n == 0 {
        return Err(AllocationError::Infeasible("layer has no heads".into()));
    }
    if tp == 0 {
        return Err(AllocationError::Infeasible("tp must be at least 1".into()));
    }
    let schemes: Vec<ReplicationScheme> = enumerate_schemes(n, &cfg.enumeration(tp))?
        .into_iter()
        .filter(|s| s.max_replicas() <= tp)
        .collect();
    if schemes.is_empty() {
        return Err(AllocationError::Infeasible(format!(
            "no replication scheme of {n} heads with ch={} r_max={} splits evenly over {tp} GPUs",
            cfg.ch_budget, cfg.r_max
        )));
    }

    let capacity_of = |s: &ReplicationScheme| {
        if cfg.equal_split {
            s.total_copies() / tp
        } else {
            usize::MAX
        }
    };
    let identity = ReplicationScheme::identity(n);
    let (base, replicated): (Vec<_>, Vec<_>) = schemes.into_iter().partition(|s| *s == identity);

    let mut exhaustive = true;
    let mut best: Option<Candidate> = None;

    if let Some(scheme) = base.first() {
        let capacity = capacity_of(scheme);
        let mut seed = heuristic_candidate(layer_weights, &scheme.replicas, tp, capacity, cfg.equal_split);
        if n.is_multiple_of(tp) {
            let sha = evaluate(contiguous_grouping(n, tp), layer_weights, &scheme.replicas);
            if sha.better_than(&seed) {
                seed = sha;
            }
        }
        let mut nodes = cfg.node_budget;
        exhaustive &= search_scheme(layer_weights, &scheme.replicas, tp, capacity, &mut seed, &mut nodes);
        best = Some(seed);
    }

    if !replicated.is_empty() {
        // Seed with the best heuristic grouping over all schemes, then search
        // the most promising schemes first.
        let mut seeded: Vec<(Candidate, &ReplicationScheme)> = replicated
            .iter()
            .map(|s| {
                (
                    heuristic_candidate(layer_weights, &s.replicas, tp, capacity_of(s), cfg.equal_split),
                    s,
                )
            })
            .collect();
        seeded.sort_by(|a, b| a.0.cmp_key(&b.0).then_with(|| a.1.cmp(b.1)));
        let mut incumbent = seeded[0].0.clone();
        if let Some(b) = &best {
            if b.better_than(&incumbent) {
                incumbent = b.clone();
            }
        }
        let mut nodes = cfg.node_budget;
        for (_, scheme) in &seeded {
            if nodes == 0 {
                exhaustive = false;
                break;
            }
            exhaustive &= search_scheme(
                layer_weights,
                &scheme.replicas,
                tp,
                capacity_of(scheme),
                &mut incumbent,
                &mut nodes,
            );
        }
        best = Some(incumbent);
    }

    let best = best.expect("at least one scheme searched");
    Ok(best.into_assignment(exhaustive))
}

/// Runs [`select_best`] on every layer. Layers are searched in parallel on the
/// current rayon pool; results are ordered by layer.
pub fn optimize_plan(
    profile: &ModelProfile,
    tp: usize,
    cfg: &AllocationConfig,
) -> Result<AllocationPlan, AllocationError> {
    profile
        .validate()
        .map_err(|e| AllocationError::Mismatch(e.to_string()))?;
    let layers = profile
        .weights
        .par_iter()
        .enumerate()
        .map(|(layer, weights)| {
            select_best(weights, tp, cfg).map_err(|e| AllocationError::Layer {
                layer,
                cause: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AllocationPlan {
        tp,
        ch_budget: cfg.ch_budget,
        r_max: cfg.r_max,
        equal_split: cfg.equal_split,
        layers,
    })
}

/// Static head allocation: heads in index order, `n / tp` per GPU, no copies.
pub fn sha_plan(profile: &ModelProfile, tp: usize) -> Result<AllocationPlan, AllocationError> {
    let n = profile.heads_per_layer;
    if tp == 0 || !n.is_multiple_of(tp) {
        return Err(AllocationError::Infeasible(format!(
            "{n} heads do not divide over {tp} GPUs"
        )));
    }
    let replicas = vec![1; n];
    let grouping = contiguous_grouping(n, tp);
    let layers = profile
        .weights
        .iter()
        .map(|w| {
            let delta = imbalance(&grouping, w);
            LayerAssignment::from_grouping(&grouping, &replicas, delta, true)
        })
        .collect();
    Ok(AllocationPlan {
        tp,
        ch_budget: 0,
        r_max: 1,
        equal_split: true,
        layers,
    })
}

/// Per-GPU adjusted load of one layer.
pub fn layer_loads(assignment: &LayerAssignment, weights: &[f64]) -> Vec<f64> {
    assignment.group_loads(weights)
}

/// Per-GPU adjusted load summed over all layers.
pub fn gpu_loads(plan: &AllocationPlan, profile: &ModelProfile) -> Result<Vec<f64>, AllocationError> {
    plan.validate(profile)?;
    let mut loads = vec![0.0; plan.tp];
    for (assignment, weights) in plan.layers.iter().zip(&profile.weights) {
        for (total, l) in loads.iter_mut().zip(assignment.group_loads(weights)) {
            *total += l;
        }
    }
    Ok(loads)
}

/// Bottleneck load: the largest per-GPU adjusted load over all layers.
pub fn objective_value(plan: &AllocationPlan, profile: &ModelProfile) -> Result<f64, AllocationError> {
    Ok(gpu_loads(plan, profile)?.into_iter().fold(0.0, f64::max))
}

/// Mean over GPUs of load divided by the bottleneck load.
pub fn efficiency_of_loads(loads: &[f64]) -> Result<f64, AllocationError> {
    let max = loads.iter().copied().fold(0.0, f64::max);
    if loads.is_empty() || max <= 0.0 {
        return Err(AllocationError::ZeroLoad);
    }
    Ok(loads.iter().map(|l| l / max).sum::<f64>() / loads.len() as f64)
}

pub fn efficiency(plan: &AllocationPlan, profile: &ModelProfile) -> Result<f64, AllocationError> {
    efficiency_of_loads(&gpu_loads(plan, profile)?)
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Unpruned exhaustive search over labeled placements, for small instances.
/// Uses the same tie-breaking as [`select_best`].
pub fn brute_force_best(
    layer_weights: &[f64],
    tp: usize,
    cfg: &AllocationConfig,
) -> Result<LayerAssignment, AllocationError> {
    let n = layer_weights.len();
    if n == 0 || tp == 0 {
        return Err(AllocationError::Infeasible("need at least one head and one GPU".into()));
    }
    let max_copies = n + cfg.ch_budget.min(n * cfg.r_max.saturating_sub(1));
    if max_copies > BRUTE_FORCE_MAX_COPIES {
        return Err(AllocationError::InstanceTooLarge {
            copies: max_copies,
            limit: BRUTE_FORCE_MAX_COPIES,
        });
    }

    let mut best: Option<Candidate> = None;
    let mut replicas = vec![1usize; n];
    loop {
        let total: usize = replicas.iter().sum();
        let feasible = total - n <= cfg.ch_budget
            && replicas.iter().all(|&r| r <= tp)
            && (!cfg.equal_split || total.is_multiple_of(tp));
        if feasible {
            brute_force_placements(layer_weights, &replicas, tp, cfg.equal_split, &mut best);
        }
        // Odometer over [1, r_max]^n.
        let mut i = 0;
        while i < n && replicas[i] == cfg.r_max {
            replicas[i] = 1;
            i += 1;
        }
        if i == n {
            break;
        }
        replicas[i] += 1;
    }
    best.map(|c| c.into_assignment(true))
        .ok_or_else(|| AllocationError::Infeasible("no feasible scheme and grouping".into()))
}

fn brute_force_placements(
    weights: &[f64],
    replicas: &[usize],
    tp: usize,
    equal_split: bool,
    best: &mut Option<Candidate>,
) {
    let n = replicas.len();
    let total: usize = replicas.iter().sum();
    let masks: Vec<Vec<u32>> = replicas
        .iter()
        .map(|&r| (0u32..(1 << tp)).filter(|m| m.count_ones() as usize == r).collect())
        .collect();
    let mut pick = vec![0usize; n];
    loop {
        let mut groups: Grouping = vec![Vec::new(); tp];
        let mut loads = vec![0.0f64; tp];
        for h in 0..n {
            let mask = masks[h][pick[h]];
            for (g, group) in groups.iter_mut().enumerate() {
                if mask & (1 << g) != 0 {
                    group.push(h);
                    loads[g] += weights[h] / replicas[h] as f64;
                }
            }
        }
        if !equal_split || groups.iter().all(|g| g.len() * tp == total) {
            let max = loads.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = loads.iter().copied().fold(f64::INFINITY, f64::min);
            let mut order: Vec<usize> = (0..tp).collect();
            order.sort_by(|&a, &b| groups[a].cmp(&groups[b]));
            let grouping: Grouping = order.iter().map(|&g| groups[g].clone()).collect();
            let candidate = Candidate {
                delta: max - min,
                copies: total,
                grouping,
                replicas: replicas.to_vec(),
            };
            if best.as_ref().is_none_or(|b| candidate.better_than(b)) {
                *best = Some(candidate);
            }
        }
        let mut i = 0;
        while i < n && pick[i] + 1 == masks[i].len() {
            pick[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
        pick[i] += 1;
    }
}
