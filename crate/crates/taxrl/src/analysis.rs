//! Post-training policy analytics: risk-aversion sweeps and calibration,
//! comparison against the best constant policy, decision histograms, and
//! purposely shallow regression-tree summaries of the learned evasion rule.

use thiserror::Error;

use crate::dqn::{self, DqnError, TrainConfig};
use crate::neuralnet::Network;
use crate::tax_env::{
    level_to_fraction, FirmAction, FirmState, TaxEnv, TaxParams, HISTORY_LEN, NUM_EVASION_LEVELS,
    NUM_STATUSES,
};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no samples to analyze")]
    NoSamples,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(
        "calibration target {target} not bracketed: mean u1 {lo_value} at lambda {lo}, {hi_value} at lambda {hi}"
    )]
    TargetNotBracketed {
        target: f64,
        lo: f64,
        lo_value: f64,
        hi: f64,
        hi_value: f64,
    },
    #[error("invalid calibration request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Dqn(#[from] DqnError),
}

// ---------------------------------------------------------------------------
// Decision samples
// ---------------------------------------------------------------------------

/// One greedy evaluation decision: the state the firm saw and what it chose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionSample {
    pub status: u8,
    pub closure_offered: bool,
    /// Evasion history levels at decision time, oldest first.
    pub history: [u8; HISTORY_LEN],
    pub phase: Option<u8>,
    /// Chosen evasion level.
    pub u1_level: u8,
    /// Chosen closure decision.
    pub u2: bool,
}

impl DecisionSample {
    pub fn from_decision(state: &FirmState, action: &FirmAction) -> DecisionSample {
        DecisionSample {
            status: state.status.value(),
            closure_offered: state.closure_offered,
            history: state.history,
            phase: state.periodic_phase,
            u1_level: action.evasion_level,
            u2: action.use_closure,
        }
    }

    pub fn u1_fraction(&self) -> f64 {
        level_to_fraction(self.u1_level)
    }

    /// Sum of the history fractions: the amount still exposed to audit.
    pub fn hidden_sum(&self) -> f64 {
        self.history.iter().map(|&h| level_to_fraction(h)).sum()
    }

    pub fn to_csv_header() -> &'static str {
        "status,closure_offered,h1,h2,h3,h4,h5,phase,sum_history,u1,u2"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.status,
            self.closure_offered as u8,
            self.history[0],
            self.history[1],
            self.history[2],
            self.history[3],
            self.history[4],
            self.phase.map_or(-1i8, |p| p as i8),
            self.hidden_sum(),
            self.u1_fraction(),
            self.u2 as u8,
        )
    }
}

pub fn samples_to_csv(samples: &[DecisionSample]) -> String {
    let mut out = String::from(DecisionSample::to_csv_header());
    out.push('\n');
    for s in samples {
        out.push_str(&s.to_csv_row());
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Counts per evasion level, 101 bins.
pub fn histogram_u1(samples: &[DecisionSample]) -> Result<Vec<u64>, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::NoSamples);
    }
    let mut counts = vec![0u64; NUM_EVASION_LEVELS];
    for s in samples {
        counts[s.u1_level as usize] += 1;
    }
    Ok(counts)
}

/// Counts per (evasion level, tax status), 101 x 15.
pub fn histogram_by_status(samples: &[DecisionSample]) -> Result<Vec<Vec<u64>>, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::NoSamples);
    }
    let mut counts = vec![vec![0u64; NUM_STATUSES]; NUM_EVASION_LEVELS];
    for s in samples {
        counts[s.u1_level as usize][s.status as usize - 1] += 1;
    }
    Ok(counts)
}

/// Counts per (evasion level, hidden-sum bin). The hidden sum lives in
/// [0, 5]; `bins` equal-width bins cover it, the last edge inclusive.
pub fn histogram_by_hidden_sum(
    samples: &[DecisionSample],
    bins: usize,
) -> Result<Vec<Vec<u64>>, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::NoSamples);
    }
    if bins == 0 {
        return Err(AnalysisError::NoBins);
    }
    let max_sum = HISTORY_LEN as f64;
    let mut counts = vec![vec![0u64; bins]; NUM_EVASION_LEVELS];
    for s in samples {
        let b = ((s.hidden_sum() / max_sum * bins as f64) as usize).min(bins - 1);
        counts[s.u1_level as usize][b] += 1;
    }
    Ok(counts)
}

/// Grid histogram as CSV, one row per evasion level.
pub fn grid_to_csv(counts: &[Vec<u64>], column_prefix: &str) -> String {
    let cols = counts.first().map_or(0, Vec::len);
    let mut out = String::from("u1_level");
    for c in 0..cols {
        out.push_str(&format!(",{column_prefix}{}", c + 1));
    }
    out.push('\n');
    for (level, row) in counts.iter().enumerate() {
        out.push_str(&level.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Shallow regression tree
// ---------------------------------------------------------------------------

/// Feature vector for the tree: 15 status indicators, the closure flag, the
/// five history fractions, and the cycle phase where present.
fn tree_features(sample: &DecisionSample) -> Vec<f64> {
    let mut f = Vec::with_capacity(NUM_STATUSES + 1 + HISTORY_LEN + 1);
    for s in 1..=NUM_STATUSES as u8 {
        f.push(if sample.status == s { 1.0 } else { 0.0 });
    }
    f.push(sample.closure_offered as u8 as f64);
    for &h in &sample.history {
        f.push(level_to_fraction(h));
    }
    if let Some(p) = sample.phase {
        f.push(p as f64);
    }
    f
}

/// Human-readable feature names matching `tree_features` order.
fn feature_name(index: usize, has_phase: bool) -> String {
    if index < NUM_STATUSES {
        format!("s{}", index + 1)
    } else if index == NUM_STATUSES {
        "c".to_string()
    } else if index < NUM_STATUSES + 1 + HISTORY_LEN {
        format!("h{}", index - NUM_STATUSES)
    } else if has_phase {
        "phase".to_string()
    } else {
        format!("f{index}")
    }
}

/// A fitted regression-tree node.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        mean_u1: f64,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

/// Depth-limited CART regression tree over evasion decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub root: TreeNode,
    pub max_depth: usize,
    pub min_impurity_decrease: f64,
    has_phase: bool,
    total_samples: usize,
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    target: &'a [f64],
    total: usize,
    max_depth: usize,
    min_impurity_decrease: f64,
}

impl TreeBuilder<'_> {
    fn mean_and_sse(&self, idx: &[usize]) -> (f64, f64) {
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.target[i]).sum::<f64>() / n;
        let sse = idx
            .iter()
            .map(|&i| {
                let d = self.target[i] - mean;
                d * d
            })
            .sum::<f64>();
        (mean, sse)
    }

    /// Best split by weighted-variance decrease; the scan order (feature
    /// index ascending, thresholds ascending, strict improvement) makes
    /// tie-breaking deterministic toward the lowest feature and threshold.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let (_, parent_sse) = self.mean_and_sse(idx);
        let feature_count = self.features[idx[0]].len();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut values: Vec<f64> = Vec::new();
        for feature in 0..feature_count {
            values.clear();
            values.extend(idx.iter().map(|&i| self.features[i][feature]));
            values.sort_by(|a, b| a.partial_cmp(b).expect("finite features"));
            values.dedup();
            if values.len() < 2 {
                continue;
            }
            for pair in values.windows(2) {
                let threshold = 0.5 * (pair[0] + pair[1]);
                let (mut ln, mut lsum, mut lsq) = (0.0f64, 0.0f64, 0.0f64);
                let (mut rn, mut rsum, mut rsq) = (0.0f64, 0.0f64, 0.0f64);
                for &i in idx {
                    let t = self.target[i];
                    if self.features[i][feature] <= threshold {
                        ln += 1.0;
                        lsum += t;
                        lsq += t * t;
                    } else {
                        rn += 1.0;
                        rsum += t;
                        rsq += t * t;
                    }
                }
                if ln == 0.0 || rn == 0.0 {
                    continue;
                }
                let child_sse = (lsq - lsum * lsum / ln) + (rsq - rsum * rsum / rn);
                // Weighted impurity decrease normalized by the whole
                // training set, the usual split-gate convention.
                let decrease = (parent_sse - child_sse) / self.total as f64;
                if decrease > self.min_impurity_decrease
                    && best.map_or(true, |(_, _, d)| decrease > d)
                {
                    best = Some((feature, threshold, decrease));
                }
            }
        }
        best
    }

    fn build(&self, idx: &[usize], depth: usize) -> TreeNode {
        let (mean, _) = self.mean_and_sse(idx);
        if depth == self.max_depth || idx.len() < 2 {
            return TreeNode::Leaf {
                mean_u1: mean,
                samples: idx.len(),
            };
        }
        match self.best_split(idx) {
            None => TreeNode::Leaf {
                mean_u1: mean,
                samples: idx.len(),
            },
            Some((feature, threshold, _)) => {
                let (left, right): (Vec<usize>, Vec<usize>) = idx
                    .iter()
                    .partition(|&&i| self.features[i][feature] <= threshold);
                TreeNode::Split {
                    feature,
                    threshold,
                    left: Box::new(self.build(&left, depth + 1)),
                    right: Box::new(self.build(&right, depth + 1)),
                }
            }
        }
    }
}

/// Fit a depth-limited CART tree to the evasion decisions by greedy
/// variance-reduction splits; a node splits only when the best split's
/// weighted-variance decrease exceeds the threshold.
pub fn fit_decision_tree(
    samples: &[DecisionSample],
    max_depth: usize,
    min_impurity_decrease: f64,
) -> Result<RegressionTree, AnalysisError> {
    if samples.len() < 2 {
        return Err(AnalysisError::NoSamples);
    }
    let features: Vec<Vec<f64>> = samples.iter().map(tree_features).collect();
    let target: Vec<f64> = samples.iter().map(DecisionSample::u1_fraction).collect();
    let builder = TreeBuilder {
        features: &features,
        target: &target,
        total: samples.len(),
        max_depth,
        min_impurity_decrease,
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(RegressionTree {
        root: builder.build(&idx, 0),
        max_depth,
        min_impurity_decrease,
        has_phase: samples[0].phase.is_some(),
        total_samples: samples.len(),
    })
}

impl RegressionTree {
    pub fn predict(&self, sample: &DecisionSample) -> f64 {
        let f = tree_features(sample);
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { mean_u1, .. } => return *mean_u1,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if f[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn depth_of(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + depth_of(left).max(depth_of(right)),
            }
        }
        depth_of(&self.root)
    }

    pub fn leaf_sample_total(&self) -> usize {
        fn total(node: &TreeNode) -> usize {
            match node {
                TreeNode::Leaf { samples, .. } => *samples,
                TreeNode::Split { left, right, .. } => total(left) + total(right),
            }
        }
        total(&self.root)
    }

    pub fn total_samples(&self) -> usize {
        self.total_samples
    }

    /// Indented text rendering.
    pub fn to_text(&self) -> String {
        fn walk(node: &TreeNode, has_phase: bool, indent: usize, out: &mut String) {
            let pad = "  ".repeat(indent);
            match node {
                TreeNode::Leaf { mean_u1, samples } => {
                    out.push_str(&format!("{pad}u1 = {mean_u1:.4} ({samples} samples)\n"));
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let name = feature_name(*feature, has_phase);
                    out.push_str(&format!("{pad}{name} <= {threshold:.4}:\n"));
                    walk(left, has_phase, indent + 1, out);
                    out.push_str(&format!("{pad}{name} > {threshold:.4}:\n"));
                    walk(right, has_phase, indent + 1, out);
                }
            }
        }
        let mut out = String::new();
        walk(&self.root, self.has_phase, 0, &mut out);
        out
    }

    /// Graphviz DOT rendering.
    pub fn to_dot(&self) -> String {
        fn walk(node: &TreeNode, has_phase: bool, id: &mut usize, out: &mut String) -> usize {
            let me = *id;
            *id += 1;
            match node {
                TreeNode::Leaf { mean_u1, samples } => {
                    out.push_str(&format!(
                        "  n{me} [label=\"u1={mean_u1:.4}\\nsamples={samples}\" shape=box];\n"
                    ));
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let name = feature_name(*feature, has_phase);
                    out.push_str(&format!("  n{me} [label=\"{name} <= {threshold:.4}\"];\n"));
                    let l = walk(left, has_phase, id, out);
                    let r = walk(right, has_phase, id, out);
                    out.push_str(&format!("  n{me} -> n{l} [label=\"yes\"];\n"));
                    out.push_str(&format!("  n{me} -> n{r} [label=\"no\"];\n"));
                }
            }
            me
        }
        let mut out = String::from("digraph policy {\n");
        let mut id = 0;
        walk(&self.root, self.has_phase, &mut id, &mut out);
        out.push_str("}\n");
        out
    }
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite values"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &order[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(x);
    let ry = rank(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

// ---------------------------------------------------------------------------
// Sweeps, calibration, constant-policy comparison
// ---------------------------------------------------------------------------

/// One row of a risk-aversion sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    /// Mean/std of the evasion fraction, or the failure message.
    pub result: Result<(f64, f64), String>,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,mean_u1,std_u1,error\n");
    for r in rows {
        match &r.result {
            Ok((mean, std)) => out.push_str(&format!("{},{},{},\n", r.lambda, mean, std)),
            Err(e) => out.push_str(&format!("{},,,{}\n", r.lambda, e.replace(',', ";"))),
        }
    }
    out
}

/// Train one policy per risk-aversion value and evaluate its average
/// evasion level over `eval_episodes x eval_steps` greedy rollouts.
/// Failures are recorded per row; the sweep continues.
pub fn sweep_lambda(
    lambdas: &[f64],
    base_params: &TaxParams,
    config: &TrainConfig,
    eval_episodes: usize,
    eval_steps: usize,
) -> Vec<SweepRow> {
    lambdas
        .iter()
        .map(|&lambda| SweepRow {
            lambda,
            result: train_and_mean_u1(lambda, base_params, config, eval_episodes, eval_steps)
                .map_err(|e| e.to_string()),
        })
        .collect()
}

fn train_and_mean_u1(
    lambda: f64,
    base_params: &TaxParams,
    config: &TrainConfig,
    eval_episodes: usize,
    eval_steps: usize,
) -> Result<(f64, f64), DqnError> {
    let mut params = base_params.clone();
    params.risk_aversion = lambda;
    let env = TaxEnv::new(params)?;
    let (net, _) = dqn::train(env.clone(), config.clone())?;
    let report = dqn::evaluate_policy(&net, &env, eval_episodes, eval_steps, config.seed)?;
    Ok((report.mean_u1, report.std_u1))
}

/// One bisection probe during risk-aversion calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProbe {
    pub lambda: f64,
    pub mean_u1: f64,
}

/// Calibration result: the fitted coefficient and the probe trace.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub lambda: f64,
    pub mean_u1: f64,
    pub probes: Vec<CalibrationProbe>,
}

pub fn calibration_to_csv(c: &Calibration) -> String {
    let mut out = String::from("probe,lambda,mean_u1\n");
    for (k, p) in c.probes.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", k + 1, p.lambda, p.mean_u1));
    }
    out.push_str(&format!("final,{},{}\n", c.lambda, c.mean_u1));
    out
}

/// Bisection on the risk-aversion coefficient until the average evasion
/// fraction is within `tolerance` of `target`. `probe` maps a coefficient
/// to the measured mean; the generic form keeps the search logic testable
/// without training runs.
pub fn calibrate_lambda_with(
    mut probe: impl FnMut(f64) -> Result<f64, AnalysisError>,
    target: f64,
    (lambda_lo, lambda_hi): (f64, f64),
    tolerance: f64,
    max_probes: usize,
) -> Result<Calibration, AnalysisError> {
    if !(0.0 < target && target < 1.0) {
        return Err(AnalysisError::BadRequest(format!(
            "target mean u1 {target} must be in (0,1)"
        )));
    }
    if !(lambda_lo < lambda_hi) {
        return Err(AnalysisError::BadRequest(format!(
            "bracket [{lambda_lo}, {lambda_hi}] is empty"
        )));
    }
    let mut probes = Vec::new();
    let mut run = |lambda: f64, probes: &mut Vec<CalibrationProbe>| -> Result<f64, AnalysisError> {
        let mean_u1 = probe(lambda)?;
        probes.push(CalibrationProbe { lambda, mean_u1 });
        Ok(mean_u1)
    };

    // Evasion falls as risk aversion rises, so the bracket must satisfy
    // mean(lo) > target > mean(hi).
    let lo_value = run(lambda_lo, &mut probes)?;
    if (lo_value - target).abs() <= tolerance {
        return Ok(Calibration {
            lambda: lambda_lo,
            mean_u1: lo_value,
            probes,
        });
    }
    let hi_value = run(lambda_hi, &mut probes)?;
    if (hi_value - target).abs() <= tolerance {
        return Ok(Calibration {
            lambda: lambda_hi,
            mean_u1: hi_value,
            probes,
        });
    }
    if !(lo_value > target && target > hi_value) {
        return Err(AnalysisError::TargetNotBracketed {
            target,
            lo: lambda_lo,
            lo_value,
            hi: lambda_hi,
            hi_value,
        });
    }

    let (mut lo, mut hi) = (lambda_lo, lambda_hi);
    for _ in probes.len()..max_probes {
        let mid = 0.5 * (lo + hi);
        let value = run(mid, &mut probes)?;
        if (value - target).abs() <= tolerance {
            return Ok(Calibration {
                lambda: mid,
                mean_u1: value,
                probes,
            });
        }
        if value > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let last = probes.last().expect("at least the bracket probes ran");
    Ok(Calibration {
        lambda: last.lambda,
        mean_u1: last.mean_u1,
        probes,
    })
}

/// Calibrate the risk-aversion coefficient so trained behavior matches a
/// target average evasion fraction; every probe trains a fresh policy.
pub fn calibrate_lambda(
    target_mean_u1: f64,
    base_params: &TaxParams,
    config: &TrainConfig,
    bracket: (f64, f64),
    tolerance: f64,
    eval_episodes: usize,
    eval_steps: usize,
) -> Result<Calibration, AnalysisError> {
    calibrate_lambda_with(
        |lambda| {
            train_and_mean_u1(lambda, base_params, config, eval_episodes, eval_steps)
                .map(|(mean, _)| mean)
                .map_err(AnalysisError::from)
        },
        target_mean_u1,
        bracket,
        tolerance,
        20,
    )
}

/// Constant-policy comparison: the trained state-dependent policy against
/// every constant evasion level (keeping the trained closure rule).
#[derive(Debug, Clone)]
pub struct ConstantComparison {
    pub trained_utility: f64,
    pub trained_mean_u1: f64,
    pub best_constant_level: u8,
    pub best_constant_utility: f64,
    /// Mean discounted utility per constant level, indexed by level.
    pub constant_utilities: Vec<f64>,
}

impl ConstantComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,u1,mean_discounted_utility\n");
        out.push_str(&format!(
            "trained,{},{}\n",
            self.trained_mean_u1, self.trained_utility
        ));
        out.push_str(&format!(
            "best_constant,{},{}\n",
            level_to_fraction(self.best_constant_level),
            self.best_constant_utility
        ));
        for (level, u) in self.constant_utilities.iter().enumerate() {
            out.push_str(&format!(
                "constant,{},{u}\n",
                level_to_fraction(level as u8)
            ));
        }
        out
    }
}

/// Evaluate the trained policy and all 101 constant policies on paired
/// evaluation seeds; the constant policies keep the trained closure rule.
pub fn compare_constant_policy(
    net: &Network,
    env: &TaxEnv,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<ConstantComparison, AnalysisError> {
    let trained = dqn::evaluate_policy(net, env, episodes, steps, seed)?;
    let mut constant_utilities = Vec::with_capacity(NUM_EVASION_LEVELS);
    let mut best_level = 0u8;
    let mut best_utility = f64::NEG_INFINITY;
    for level in 0..NUM_EVASION_LEVELS as u8 {
        let utility = evaluate_constant_policy(net, env, level, episodes, steps, seed)?;
        if utility > best_utility {
            best_utility = utility;
            best_level = level;
        }
        constant_utilities.push(utility);
    }
    Ok(ConstantComparison {
        trained_utility: trained.mean_discounted_utility,
        trained_mean_u1: trained.mean_u1,
        best_constant_level: best_level,
        best_constant_utility: best_utility,
        constant_utilities,
    })
}

/// Greedy rollouts holding the evasion level constant while the closure
/// decision still follows the network.
fn evaluate_constant_policy(
    net: &Network,
    env: &TaxEnv,
    level: u8,
    episodes: usize,
    steps: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    use crate::neuralnet::BatchCache;
    use crate::rng::{substream, Stream};
    let dim = env.observation_dim();
    let mut cache = BatchCache::new(&net.spec, 1);
    let mut obs = vec![0.0; dim];
    let mut total = 0.0;
    let gamma = env.params.discount;
    for episode in 0..episodes {
        let mut rng = substream(seed, Stream::Eval, episode as u64);
        let mut state = env.initial_state(&mut rng);
        let mut discount = 1.0;
        for _ in 0..steps {
            env.encode_observation(&state, &mut obs);
            let pick =
                dqn::select_action(net, &mut cache, &obs, state.closure_offered, 0.0, &mut rng)?;
            let action = FirmAction {
                evasion_level: level,
                use_closure: pick.use_closure,
            };
            let outcome = env.step(&state, &action, &mut rng).map_err(DqnError::from)?;
            total += discount * outcome.utility;
            discount *= gamma;
            state = outcome.next;
        }
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(status: u8, offered: bool, history: [u8; 5], u1: u8, u2: bool) -> DecisionSample {
        DecisionSample {
            status,
            closure_offered: offered,
            history,
            phase: None,
            u1_level: u1,
            u2,
        }
    }

    #[test]
    fn hidden_sum_adds_history_fractions() {
        let s = sample(15, false, [100, 50, 0, 25, 25], 10, false);
        assert!((s.hidden_sum() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_conserves_counts() {
        let samples: Vec<DecisionSample> = (0..500)
            .map(|i| sample((i % 15) as u8 + 1, i % 3 == 0, [0; 5], (i % 101) as u8, false))
            .collect();
        let h = histogram_u1(&samples).unwrap();
        assert_eq!(h.iter().sum::<u64>(), 500);
        let hs = histogram_by_status(&samples).unwrap();
        let total: u64 = hs.iter().flat_map(|r| r.iter()).sum();
        assert_eq!(total, 500);
        let hh = histogram_by_hidden_sum(&samples, 25).unwrap();
        let total: u64 = hh.iter().flat_map(|r| r.iter()).sum();
        assert_eq!(total, 500);
    }

    #[test]
    fn histogram_rejects_empty_input_and_zero_bins() {
        assert!(matches!(histogram_u1(&[]), Err(AnalysisError::NoSamples)));
        assert!(matches!(
            histogram_by_hidden_sum(&[sample(1, false, [0; 5], 0, false)], 0),
            Err(AnalysisError::NoBins)
        ));
    }

    #[test]
    fn constant_samples_give_single_leaf() {
        let samples: Vec<DecisionSample> = (0..100)
            .map(|i| sample((i % 15) as u8 + 1, i % 2 == 0, [i as u8 % 50; 5], 37, false))
            .collect();
        let tree = fit_decision_tree(&samples, 3, 1e-4).unwrap();
        match tree.root {
            TreeNode::Leaf { mean_u1, samples } => {
                assert!((mean_u1 - 0.37).abs() < 1e-12);
                assert_eq!(samples, 100);
            }
            _ => panic!("expected a single leaf"),
        }
    }

    #[test]
    fn perfect_separator_splits_on_closure_flag() {
        let mut samples = Vec::new();
        for _ in 0..200 {
            samples.push(sample(12, false, [0; 5], 37, false));
            samples.push(sample(12, true, [0; 5], 44, false));
        }
        let tree = fit_decision_tree(&samples, 3, 1e-4).unwrap();
        match &tree.root {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                assert_eq!(*feature, NUM_STATUSES, "splits on the closure flag");
                assert!((*threshold - 0.5).abs() < 1e-12);
                match (left.as_ref(), right.as_ref()) {
                    (TreeNode::Leaf { mean_u1: l, .. }, TreeNode::Leaf { mean_u1: r, .. }) => {
                        assert!((l - 0.37).abs() < 1e-12);
                        assert!((r - 0.44).abs() < 1e-12);
                    }
                    _ => panic!("expected two leaves"),
                }
            }
            _ => panic!("expected a split"),
        }
    }

    #[test]
    fn tree_respects_depth_and_conserves_samples() {
        let samples: Vec<DecisionSample> = (0..1000)
            .map(|i| {
                sample(
                    (i % 15) as u8 + 1,
                    i % 2 == 0,
                    [(i % 101) as u8; 5],
                    ((i * 13) % 101) as u8,
                    false,
                )
            })
            .collect();
        let tree = fit_decision_tree(&samples, 3, 1e-6).unwrap();
        assert!(tree.depth() <= 3);
        assert_eq!(tree.leaf_sample_total(), 1000);
    }

    #[test]
    fn tree_predictions_reduce_mse_below_variance() {
        let samples: Vec<DecisionSample> = (0..600)
            .map(|i| {
                let status = (i % 15) as u8 + 1;
                let u1 = if status <= 5 { 90 } else { 20 };
                sample(status, false, [0; 5], u1, false)
            })
            .collect();
        let tree = fit_decision_tree(&samples, 3, 1e-4).unwrap();
        let mean = samples.iter().map(|s| s.u1_fraction()).sum::<f64>() / samples.len() as f64;
        let variance = samples
            .iter()
            .map(|s| (s.u1_fraction() - mean).powi(2))
            .sum::<f64>()
            / samples.len() as f64;
        let mse = samples
            .iter()
            .map(|s| (s.u1_fraction() - tree.predict(s)).powi(2))
            .sum::<f64>()
            / samples.len() as f64;
        assert!(mse <= variance);
    }

    #[test]
    fn high_threshold_blocks_marginal_splits() {
        // Tiny mean difference: the weighted variance decrease is about
        // 2.5e-5, below the 1e-4 gate, so the root must stay a leaf.
        let mut samples = Vec::new();
        for _ in 0..500 {
            samples.push(sample(12, false, [0; 5], 50, false));
            samples.push(sample(12, true, [0; 5], 51, false));
        }
        let tree = fit_decision_tree(&samples, 3, 1e-4).unwrap();
        assert!(matches!(tree.root, TreeNode::Leaf { .. }), "{:?}", tree.root);
    }

    #[test]
    fn tree_renders_text_and_dot() {
        let mut samples = Vec::new();
        for _ in 0..50 {
            samples.push(sample(5, false, [100; 5], 98, false));
            samples.push(sample(15, false, [0; 5], 27, false));
        }
        let tree = fit_decision_tree(&samples, 3, 1e-4).unwrap();
        let text = tree.to_text();
        assert!(text.contains("u1 ="));
        let dot = tree.to_dot();
        assert!(dot.starts_with("digraph"));
        assert!(dot.contains("shape=box"));
    }

    #[test]
    fn spearman_detects_monotone_and_ties() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let up = [1.0, 2.0, 3.0, 4.0, 5.0];
        let down = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down) + 1.0).abs() < 1e-12);
        // Noisy but downward.
        let y = [0.9, 0.95, 0.5, 0.4, 0.1];
        assert!(spearman(&x, &y) < 0.0);
        // Ties get averaged ranks without panicking.
        let tied = [1.0, 1.0, 1.0, 0.5, 0.5];
        assert!(spearman(&x, &tied) < 0.0);
    }

    #[test]
    fn calibration_bisects_a_synthetic_monotone_curve() {
        // mean u1 = 1 / (1 + lambda), decreasing; target 0.4 at lambda 1.5.
        let calib = calibrate_lambda_with(
            |lambda| Ok(1.0 / (1.0 + lambda)),
            0.4,
            (0.0, 8.0),
            0.005,
            40,
        )
        .unwrap();
        assert!((calib.lambda - 1.5).abs() < 0.1, "lambda {}", calib.lambda);
        assert!((calib.mean_u1 - 0.4).abs() <= 0.005);
        assert!(calib.probes.len() >= 3);
    }

    #[test]
    fn calibration_returns_bracket_end_when_target_met_there() {
        let calib = calibrate_lambda_with(
            |lambda| Ok(1.0 / (1.0 + lambda)),
            0.999,
            (0.0, 8.0),
            0.01,
            40,
        )
        .unwrap();
        assert_eq!(calib.lambda, 0.0);
        assert_eq!(calib.probes.len(), 1);
    }

    #[test]
    fn calibration_reports_bracket_failure_with_endpoints() {
        let err = calibrate_lambda_with(
            |lambda| Ok(1.0 / (1.0 + lambda)),
            0.95,
            (1.0, 8.0),
            0.001,
            40,
        )
        .unwrap_err();
        match err {
            AnalysisError::TargetNotBracketed {
                lo_value, hi_value, ..
            } => {
                assert!((lo_value - 0.5).abs() < 1e-12);
                assert!((hi_value - 1.0 / 9.0).abs() < 1e-12);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn calibration_rejects_bad_requests() {
        assert!(calibrate_lambda_with(|_| Ok(0.5), 1.5, (0.0, 1.0), 0.01, 10).is_err());
        assert!(calibrate_lambda_with(|_| Ok(0.5), 0.5, (2.0, 1.0), 0.01, 10).is_err());
    }

    #[test]
    fn constant_comparison_ties_when_the_policy_is_constant() {
        // A network biased toward full concealment behaves exactly like the
        // constant-1.0 policy, so the paired comparison must tie there, and
        // with a risk-neutral firm full concealment is the best constant.
        use crate::neuralnet::{Network, NetworkSpec};
        use crate::tax_env::{ClosureScenario, TaxEnv, TaxParams};
        let env = TaxEnv::new(TaxParams {
            closure_scenario: ClosureScenario::Never,
            ..TaxParams::default()
        })
        .unwrap();
        let mut net = Network::zeros(NetworkSpec {
            input_dim: env.observation_dim(),
            trunk: vec![8],
            head_widths: [NUM_EVASION_LEVELS, 2],
        })
        .unwrap();
        net.heads[0].set_bias(100, 1.0);
        let comparison = compare_constant_policy(&net, &env, 10, 40, 5).unwrap();
        assert_eq!(comparison.best_constant_level, 100);
        assert_eq!(comparison.trained_utility, comparison.best_constant_utility);
        assert_eq!(comparison.trained_mean_u1, 1.0);
        assert!(comparison
            .constant_utilities
            .windows(2)
            .all(|w| w[0] <= w[1] + 1e-9));
    }
}
