//! Shallow rule trees fitted to a trained surrogate's predictions.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, FEATURE_NAMES};
use super::metrics::{macro_f1, smape};
use super::model::{StarvationPredictor, SurrogateModel, ThroughputPredictor};
use super::search::Task;
use super::tree::{median, Criterion, MaxFeatures, Row, Tree, TreeParams};
use crate::error::{invalid, Error, Result};

pub const RULES_SCHEMA: &str = "lorapack-rules v1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub threshold: f64,
    /// `x <= threshold` when true, its negation otherwise (NaN lands here).
    pub le: bool,
}

impl Condition {
    #[inline]
    pub fn holds(&self, x: &Row) -> bool {
        (x[self.feature] <= self.threshold) == self.le
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleTree {
    pub schema: String,
    pub task: Task,
    pub budget: usize,
    pub rule_count: usize,
    pub tree: Tree,
    pub rules: Vec<Rule>,
    /// Agreement with the teacher on its training rows: SMAPE against the
    /// teacher's output or macro-F1 against its labels.
    pub fidelity: f64,
    #[serde(default)]
    pub seed: u64,
    pub profile_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOptions {
    pub budget: usize,
    /// Cost added per rule when choosing the tree size, in metric units
    /// (SMAPE points, or macro-F1 for starvation).
    pub penalty: f64,
}

impl DistillOptions {
    pub fn new(budget: usize, task: Task) -> Self {
        Self {
            budget,
            penalty: match task {
                Task::Throughput => 0.02,
                Task::Starvation => 0.0002,
            },
        }
    }
}

fn rules_of(tree: &Tree) -> Vec<Rule> {
    fn go(t: &Tree, i: usize, path: &mut Vec<Condition>, out: &mut Vec<Rule>) {
        if t.is_leaf(i) {
            out.push(Rule {
                conditions: path.clone(),
                value: t.value[i],
            });
            return;
        }
        let l = t.left[i] as usize;
        for (child, le) in [(l, true), (l + 1, false)] {
            path.push(Condition {
                feature: t.feature[i] as usize,
                threshold: t.threshold[i],
                le,
            });
            go(t, child, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(tree, 0, &mut Vec::new(), &mut out);
    out
}

fn loss(task: Task, pred: &[f64], teacher: &[f64]) -> Result<f64> {
    match task {
        Task::Throughput => smape(pred, teacher),
        Task::Starvation => {
            let p: Vec<bool> = pred.iter().map(|&v| v > 0.5).collect();
            let t: Vec<bool> = teacher.iter().map(|&v| v > 0.5).collect();
            macro_f1(&p, &t).map(|f| 1.0 - f)
        }
    }
}

/// Fit a RuleTree with at most `budget` leaves to `teacher` outputs on `x`.
///
/// For throughput the split structure is grown on log targets, so that it
/// tracks relative error, and each leaf predicts the median teacher output of
/// its rows. For starvation leaves hold the fraction of rows the teacher
/// labels starved.
pub fn distill(
    x: &[Row],
    teacher: &[f64],
    task: Task,
    opts: &DistillOptions,
) -> Result<(RuleTree, Vec<f64>)> {
    if opts.budget < 2 {
        return invalid(format!(
            "rule budget must be at least 2, got {}",
            opts.budget
        ));
    }
    if x.is_empty() || x.len() != teacher.len() {
        return invalid("distillation needs one teacher output per row");
    }
    let depth = (opts.budget as f64).log2().ceil() as usize;
    let (fit_y, criterion): (Vec<f64>, _) = match task {
        Task::Throughput => (
            teacher.iter().map(|&v| v.max(0.0).ln_1p()).collect(),
            Criterion::SquaredError,
        ),
        Task::Starvation => (
            teacher
                .iter()
                .map(|&v| f64::from(u8::from(v > 0.5)))
                .collect(),
            Criterion::Gini,
        ),
    };
    let raw = teacher.to_vec();
    let fit = |leaves: usize| -> Result<(Tree, f64)> {
        let params = TreeParams {
            criterion,
            max_depth: Some(depth),
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            max_leaves: Some(leaves),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tree = Tree::fit(x, &fit_y, (0..x.len()).collect(), &params, &mut rng);
        let mut groups: Vec<Vec<f64>> = vec![Vec::new(); tree.feature.len()];
        for (r, &t) in x.iter().zip(&raw) {
            groups[tree.leaf_index(r)].push(t);
        }
        for (node, g) in groups.iter_mut().enumerate() {
            if tree.is_leaf(node) && !g.is_empty() {
                tree.value[node] = match task {
                    Task::Throughput => median(g),
                    Task::Starvation => {
                        g.iter().filter(|&&v| v > 0.5).count() as f64 / g.len() as f64
                    }
                };
            }
        }
        let pred: Vec<f64> = x.iter().map(|r| tree.predict(r)).collect();
        let l = loss(task, &pred, &raw)?;
        Ok((tree, l))
    };

    let mut best: Option<(f64, Tree, f64)> = None;
    let mut last_leaves = 0;
    for k in 1..=opts.budget {
        let (tree, l) = fit(k)?;
        let leaves = tree.n_leaves();
        if leaves == last_leaves {
            // growth stopped: no further split helps
            break;
        }
        last_leaves = leaves;
        let cost = l + opts.penalty * leaves as f64;
        if best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, tree, l));
        }
    }
    let (_, tree, l) = best.expect("at least one fit");
    let pred: Vec<f64> = x.iter().map(|r| tree.predict(r)).collect();
    let rules = rules_of(&tree);
    let fidelity = match task {
        Task::Throughput => l,
        Task::Starvation => 1.0 - l,
    };
    Ok((
        RuleTree {
            schema: RULES_SCHEMA.into(),
            task,
            budget: opts.budget,
            rule_count: rules.len(),
            tree,
            rules,
            fidelity,
            seed: 0,
            profile_hash: String::new(),
        },
        pred,
    ))
}

/// Distill a trained model using its own predictions on `x` as targets.
pub fn distill_model(model: &SurrogateModel, x: &[Row], opts: &DistillOptions) -> Result<RuleTree> {
    let teacher: Vec<f64> = x
        .iter()
        .map(|r| {
            let v = model.predict_row(r);
            if model.task == Task::Throughput {
                v.max(0.0)
            } else {
                v
            }
        })
        .collect();
    let (mut rt, _) = distill(x, &teacher, model.task, opts)?;
    rt.seed = model.seed;
    rt.profile_hash = model.profile_hash.clone();
    Ok(rt)
}

impl RuleTree {
    #[inline]
    pub fn predict_row(&self, x: &Row) -> f64 {
        self.tree.predict(x)
    }

    pub fn predict(&self, fv: &FeatureVector) -> f64 {
        self.predict_row(&fv.to_array())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if t.schema != RULES_SCHEMA {
            return invalid(format!("unsupported rule schema {:?}", t.schema));
        }
        Ok(t)
    }

    /// One `if <conjunction> then <value>` line per rule. Thresholds and
    /// values print in shortest round-trip form, so parsing is lossless.
    pub fn export(&self) -> String {
        let mut s = String::new();
        for r in &self.rules {
            let conds: Vec<String> = r
                .conditions
                .iter()
                .map(|c| {
                    format!(
                        "{} {} {:?}",
                        FEATURE_NAMES[c.feature],
                        if c.le { "<=" } else { ">" },
                        c.threshold
                    )
                })
                .collect();
            let body = if conds.is_empty() {
                "true".to_string()
            } else {
                conds.join(" and ")
            };
            let _ = writeln!(s, "if {body} then {:?}", r.value);
        }
        s
    }
}

/// Parse the text produced by [`RuleTree::export`].
pub fn parse_rules(text: &str) -> Result<Vec<Rule>> {
    let bad = |l: &str| Error::Parse(format!("bad rule line {l:?}"));
    let mut out = Vec::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let rest = line.strip_prefix("if ").ok_or_else(|| bad(line))?;
        let (body, value) = rest.rsplit_once(" then ").ok_or_else(|| bad(line))?;
        let value: f64 = value.trim().parse().map_err(|_| bad(line))?;
        let mut conditions = Vec::new();
        if body.trim() != "true" {
            for c in body.split(" and ") {
                let mut it = c.split_whitespace();
                let (Some(name), Some(op), Some(t), None) =
                    (it.next(), it.next(), it.next(), it.next())
                else {
                    return Err(bad(line));
                };
                let feature = FEATURE_NAMES
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| bad(line))?;
                let le = match op {
                    "<=" => true,
                    ">" => false,
                    _ => return Err(bad(line)),
                };
                conditions.push(Condition {
                    feature,
                    threshold: t.parse().map_err(|_| bad(line))?,
                    le,
                });
            }
        }
        out.push(Rule { conditions, value });
    }
    Ok(out)
}

/// Value of the first rule whose every condition holds.
pub fn eval_rules(rules: &[Rule], x: &Row) -> Option<f64> {
    rules
        .iter()
        .find(|r| r.conditions.iter().all(|c| c.holds(x)))
        .map(|r| r.value)
}

impl ThroughputPredictor for RuleTree {
    fn predict_throughput(&self, fv: &FeatureVector) -> f64 {
        self.predict(fv).max(0.0)
    }
}

impl StarvationPredictor for RuleTree {
    fn predict_starvation(&self, fv: &FeatureVector) -> bool {
        self.predict(fv) > 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<Row> {
        (0..n)
            .map(|i| std::array::from_fn(|d| ((i * (2 * d + 3) * 31) % 97) as f64))
            .collect()
    }

    #[test]
    fn budget_below_two_rejected() {
        let x = rows(10);
        assert!(distill(
            &x,
            &[1.0; 10],
            Task::Throughput,
            &DistillOptions::new(1, Task::Throughput)
        )
        .is_err());
    }

    #[test]
    fn constant_teacher_gives_one_rule() {
        let x = rows(100);
        let (t, _) = distill(
            &x,
            &vec![42.0; 100],
            Task::Throughput,
            &DistillOptions::new(32, Task::Throughput),
        )
        .unwrap();
        assert_eq!(t.rule_count, 1);
        assert_eq!(t.predict_row(&x[3]), 42.0);
    }

    #[test]
    fn rule_count_within_budget_and_export_is_lossless() {
        let x = rows(400);
        let y: Vec<f64> = x.iter().map(|r| 100.0 + r[1] * r[6] + 5.0 * r[0]).collect();
        for budget in [2, 5, 16, 32] {
            let (t, _) = distill(
                &x,
                &y,
                Task::Throughput,
                &DistillOptions::new(budget, Task::Throughput),
            )
            .unwrap();
            assert!(t.rule_count <= budget && t.rule_count == t.tree.n_leaves());
            let parsed = parse_rules(&t.export()).unwrap();
            assert_eq!(parsed, t.rules);
            for r in &x {
                assert_eq!(eval_rules(&parsed, r), Some(t.predict_row(r)));
            }
        }
    }
}
