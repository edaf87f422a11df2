//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use filmppo::env::DoneReason;
use filmppo::nn::{Activation, BranchSpec, LayerSpec, Network, NetworkSpec};
use filmppo::policy::PolicyVersion;
use filmppo::rollout::{RolloutBuffer, TailKind, Transition};
use rand::Rng;
use rand_distr::StandardNormal;

const ACTIVATIONS: [Activation; 4] = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Linear];

fn random_layer<R: Rng>(rng: &mut R) -> LayerSpec {
    LayerSpec { width: rng.random_range(1..=6), activation: ACTIVATIONS[rng.random_range(0..4)] }
}

/// Small network with a random architecture and Gaussian parameters.
pub fn random_network<R: Rng>(rng: &mut R) -> Network {
    let spec = NetworkSpec {
        input_dim: rng.random_range(1..=4),
        trunk: (0..rng.random_range(0..=2)).map(|_| random_layer(rng)).collect(),
        branches: (0..rng.random_range(1..=2))
            .map(|_| BranchSpec {
                hidden: (0..rng.random_range(0..=1)).map(|_| random_layer(rng)).collect(),
                out_dim: rng.random_range(1..=3),
                head: ACTIVATIONS[rng.random_range(0..4)],
                head_gain: 1.0,
            })
            .collect(),
    };
    let mut net = Network::zeros(spec).unwrap();
    for p in net.params_mut() {
        *p = 0.7 * rng.sample::<f64, _>(StandardNormal);
    }
    net
}

/// Loss `sum_b c_b . head_b(x)` for fixed coefficients.
fn linear_loss(net: &Network, x: &[f64], coeffs: &[Vec<f64>]) -> f64 {
    let (heads, _) = net.forward(x).unwrap();
    heads.iter().zip(coeffs).map(|(h, c)| h.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()).sum()
}

/// Fourth-order central difference of `f` in parameter `i`.
pub fn central_difference<F: Fn(&Network) -> f64>(net: &mut Network, i: usize, f: F) -> f64 {
    let step = 1e-4;
    let orig = net.params()[i];
    let mut at = |k: f64| {
        net.params_mut()[i] = orig + k * step;
        f(net)
    };
    let d = 8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0));
    net.params_mut()[i] = orig;
    d / (12.0 * step)
}

/// Largest relative error between the backward pass and central finite
/// differences, with the denominator floored at `1e-6`.
pub fn gradient_check<R: Rng>(net: &mut Network, rng: &mut R) -> f64 {
    let x: Vec<f64> = (0..net.spec().input_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let coeffs: Vec<Vec<f64>> =
        net.spec().branches.iter().map(|b| (0..b.out_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let (_, tape) = net.forward(&x).unwrap();
    let refs: Vec<&[f64]> = coeffs.iter().map(|c| c.as_slice()).collect();
    let analytic = net.backward(&tape, &refs).unwrap();
    let mut worst = 0.0f64;
    for i in 0..net.param_count() {
        let numeric = central_difference(net, i, |n| linear_loss(n, &x, &coeffs));
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// One random group: rewards, values, tail kind and tail value.
pub struct RandomGroup {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub kind: TailKind,
    pub tail: f64,
}

fn transition(env_id: usize, step_index: usize, reward: f64, value: f64, done: DoneReason) -> Transition {
    Transition {
        observation: vec![0.0],
        raw_action: vec![0.0],
        log_prob: 0.0,
        reward,
        value,
        done_reason: done,
        policy_version: PolicyVersion(0),
        env_id,
        step_index,
    }
}

pub fn random_groups<R: Rng>(rng: &mut R) -> Vec<RandomGroup> {
    (0..rng.random_range(1..=5))
        .map(|_| {
            let n = rng.random_range(1..=40);
            RandomGroup {
                rewards: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
                values: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
                kind: [TailKind::TrueTerminal, TailKind::TimeOutBootstrap, TailKind::PartialBootstrap]
                    [rng.random_range(0..3)],
                tail: rng.random_range(-5.0..5.0),
            }
        })
        .collect()
}

pub fn build_buffer(groups: &[RandomGroup]) -> RolloutBuffer {
    let mut b = RolloutBuffer::new(true);
    for (id, g) in groups.iter().enumerate() {
        let last = match g.kind {
            TailKind::TrueTerminal => DoneReason::Terminal,
            TailKind::TimeOutBootstrap => DoneReason::TimeOut,
            TailKind::PartialBootstrap => DoneReason::Running,
        };
        let n = g.rewards.len();
        for k in 0..n {
            let done = if k + 1 == n { last } else { DoneReason::Running };
            b.append_transition(transition(id, k, g.rewards[k], g.values[k], done)).unwrap();
        }
        let value = (g.kind != TailKind::TrueTerminal).then_some(g.tail);
        b.close_group(id, g.kind, value).unwrap();
    }
    b
}

/// Discounted sums written out term by term.
pub fn brute_force_returns(groups: &[RandomGroup], gamma: f64, eoe: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for g in groups {
        let n = g.rewards.len();
        let b = g.kind.bootstrap_factor(eoe);
        for t in 0..n {
            let mut s = 0.0;
            for k in t..n {
                s += gamma.powi((k - t) as i32) * g.rewards[k];
            }
            out.push(s + gamma.powi((n - t) as i32) * b * g.tail);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Compares two assembled buffers bit for bit, ignoring which worker
/// produced each group. Returns a description of the first difference.
pub fn buffer_difference(a: &RolloutBuffer, b: &RolloutBuffer) -> Option<String> {
    if a.groups().len() != b.groups().len() || a.len() != b.len() {
        return Some(format!("sizes differ: {} vs {} transitions", a.len(), b.len()));
    }
    for (gi, (ga, gb)) in a.groups().iter().zip(b.groups()).enumerate() {
        let (ta, tb) = (ga.tail.unwrap(), gb.tail.unwrap());
        if ta.kind != tb.kind || ta.value.map(f64::to_bits) != tb.value.map(f64::to_bits) {
            return Some(format!("group {gi}: tails differ"));
        }
        if ga.transitions.len() != gb.transitions.len() {
            return Some(format!("group {gi}: lengths differ"));
        }
        for (x, y) in ga.transitions.iter().zip(&gb.transitions) {
            let same = same_bits(&x.observation, &y.observation)
                && same_bits(&x.raw_action, &y.raw_action)
                && same_bits(&[x.log_prob, x.reward, x.value], &[y.log_prob, y.reward, y.value])
                && x.done_reason == y.done_reason
                && x.step_index == y.step_index
                && x.policy_version == y.policy_version;
            if !same {
                return Some(format!("group {gi}, step {}: transitions differ", x.step_index));
            }
        }
    }
    if !same_bits(a.targets(), b.targets()) {
        return Some("value targets differ".into());
    }
    if !same_bits(a.advantages(), b.advantages()) {
        return Some("advantages differ".into());
    }
    None
}
