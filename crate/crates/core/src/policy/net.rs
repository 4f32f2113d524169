//! The policy network: 8 features -> 16 tanh units with inverted dropout ->
//! 2-way softmax, with manual backprop for the policy-gradient loss.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, PolicyState};
use crate::error::{Error, Result};
use crate::seeds;
use crate::util::write_atomic;

pub const FEATURE_DIM: usize = 8;
pub const HIDDEN_DIM: usize = 16;
pub const ACTION_DIM: usize = 2;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.1;
const FORMAT_VERSION: u32 = 1;

/// Dropout behavior of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Deterministic pass with no units dropped.
    Off,
    /// Inverted-dropout mask on the hidden layer, deterministic per seed.
    Seeded(u64),
}

/// Two-action stochastic policy over hand-built features.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    dropout_rate: f64,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    format_version: u32,
    feature_dim: usize,
    hidden_dim: usize,
    action_dim: usize,
    dropout_rate: f64,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Output of a sampled action draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAction {
    pub action: Action,
    pub log_prob: f64,
    pub probs: (f64, f64),
}

fn softmax2(logits: &Array1<f64>) -> (f64, f64) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

impl PolicyNet {
    /// Seeded uniform init in [-0.1, 0.1] for weights; zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |_: ()| rng.gen_range(-0.1..0.1);
        let w1 = Array2::from_shape_fn((FEATURE_DIM, HIDDEN_DIM), |_| draw(()));
        let w2 = Array2::from_shape_fn((HIDDEN_DIM, ACTION_DIM), |_| draw(()));
        Self {
            w1,
            b1: Array1::zeros(HIDDEN_DIM),
            w2,
            b2: Array1::zeros(ACTION_DIM),
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }

    pub fn zeros() -> Self {
        Self {
            w1: Array2::zeros((FEATURE_DIM, HIDDEN_DIM)),
            b1: Array1::zeros(HIDDEN_DIM),
            w2: Array2::zeros((HIDDEN_DIM, ACTION_DIM)),
            b2: Array1::zeros(ACTION_DIM),
            dropout_rate: DEFAULT_DROPOUT_RATE,
        }
    }

    pub fn with_dropout_rate(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Validation(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    fn mask(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = 1.0 / (1.0 - self.dropout_rate);
        Array1::from_shape_fn(HIDDEN_DIM, |_| {
            if rng.gen::<f64>() >= self.dropout_rate {
                keep_scale
            } else {
                0.0
            }
        })
    }

    fn forward_from_features(
        &self,
        features: &[f64; FEATURE_DIM],
        mask: Option<&Array1<f64>>,
    ) -> ForwardTrace {
        let x = Array1::from_vec(features.to_vec());
        let pre = self.w1.t().dot(&x) + &self.b1;
        let tanh = pre.mapv(f64::tanh);
        let hidden = match mask {
            Some(mask) => &tanh * mask,
            None => tanh.clone(),
        };
        let logits = self.w2.t().dot(&hidden) + &self.b2;
        let probs = softmax2(&logits);
        ForwardTrace {
            input: x,
            tanh,
            hidden,
            probs,
        }
    }

    /// Softmax action probabilities (p_fetch, p_no_fetch).
    pub fn forward(&self, state: &PolicyState, mode: DropoutMode) -> (f64, f64) {
        let mask = match mode {
            DropoutMode::Off => None,
            DropoutMode::Seeded(seed) => Some(self.mask(seed)),
        };
        self.forward_from_features(&state.features, mask.as_ref())
            .probs
    }

    /// Arithmetic mean of `passes` seeded-dropout forward passes; pass `i`
    /// uses the derived seed `seeds::derive(seed, i)`.
    pub fn mc_predict(&self, state: &PolicyState, passes: usize, seed: u64) -> (f64, f64) {
        assert!(passes >= 1, "mc_predict needs at least one pass");
        if self.dropout_rate == 0.0 {
            return self.forward(state, DropoutMode::Off);
        }
        let mut sum = (0.0, 0.0);
        for pass in 0..passes {
            let p = self.forward(state, DropoutMode::Seeded(seeds::derive(seed, pass as u64)));
            sum.0 += p.0;
            sum.1 += p.1;
        }
        (sum.0 / passes as f64, sum.1 / passes as f64)
    }

    /// Bernoulli draw from a training-mode (seeded dropout) forward pass.
    /// The same seed always yields the same mask, draw, and log-probability.
    pub fn sample_action(&self, state: &PolicyState, seed: u64) -> SampledAction {
        let probs = self.forward(state, DropoutMode::Seeded(seeds::derive(seed, 0)));
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
        let action = if rng.gen::<f64>() < probs.0 {
            Action::Fetch
        } else {
            Action::NoFetch
        };
        let chosen = match action {
            Action::Fetch => probs.0,
            Action::NoFetch => probs.1,
        };
        SampledAction {
            action,
            log_prob: chosen.ln(),
            probs,
        }
    }

    /// Persisted as JSON with row-major weight arrays and a format-version
    /// field.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = PolicyFile {
            format_version: FORMAT_VERSION,
            feature_dim: FEATURE_DIM,
            hidden_dim: HIDDEN_DIM,
            action_dim: ACTION_DIM,
            dropout_rate: self.dropout_rate,
            w1: self.w1.iter().copied().collect(),
            b1: self.b1.to_vec(),
            w2: self.w2.iter().copied().collect(),
            b2: self.b2.to_vec(),
        };
        let json = serde_json::to_string(&file).expect("policy serializes");
        write_atomic(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)?;
        let file: PolicyFile = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported policy format version {}",
                file.format_version
            )));
        }
        if file.feature_dim != FEATURE_DIM
            || file.hidden_dim != HIDDEN_DIM
            || file.action_dim != ACTION_DIM
            || file.w1.len() != FEATURE_DIM * HIDDEN_DIM
            || file.b1.len() != HIDDEN_DIM
            || file.w2.len() != HIDDEN_DIM * ACTION_DIM
            || file.b2.len() != ACTION_DIM
        {
            return Err(Error::Validation(
                "policy file dimensions do not match this build".into(),
            ));
        }
        Ok(Self {
            w1: Array2::from_shape_vec((FEATURE_DIM, HIDDEN_DIM), file.w1).expect("checked"),
            b1: Array1::from_vec(file.b1),
            w2: Array2::from_shape_vec((HIDDEN_DIM, ACTION_DIM), file.w2).expect("checked"),
            b2: Array1::from_vec(file.b2),
            dropout_rate: file.dropout_rate,
        })
    }

    pub(crate) fn apply_update(&mut self, grads: &PolicyGrads, learning_rate: f64) {
        self.w1.scaled_add(-learning_rate, &grads.w1);
        self.b1.scaled_add(-learning_rate, &grads.b1);
        self.w2.scaled_add(-learning_rate, &grads.w2);
        self.b2.scaled_add(-learning_rate, &grads.b2);
    }
}

struct ForwardTrace {
    input: Array1<f64>,
    tanh: Array1<f64>,
    hidden: Array1<f64>,
    probs: (f64, f64),
}

/// One training example for the policy-gradient loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgExample {
    pub features: [f64; FEATURE_DIM],
    pub action: Action,
    pub ret: f64,
}

/// Parameter gradients, same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl PolicyGrads {
    fn zeros() -> Self {
        Self {
            w1: Array2::zeros((FEATURE_DIM, HIDDEN_DIM)),
            b1: Array1::zeros(HIDDEN_DIM),
            w2: Array2::zeros((HIDDEN_DIM, ACTION_DIM)),
            b2: Array1::zeros(ACTION_DIM),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .fold(0.0f64, |acc, g| acc.max(g.abs()))
    }
}

/// Mean policy-gradient-with-entropy loss over a batch of steps:
/// `-log pi(a|s) * G - lambda * H(pi(.|s))`, with H the natural-log Shannon
/// entropy of the two-way action distribution. The dropout mask of batch
/// position `i` is fixed by `seeds::derive(mask_seed, i)`, so gradients and
/// finite differences see identical masks. Returns the loss and analytic
/// gradients for all parameters.
pub fn pg_loss(
    net: &PolicyNet,
    examples: &[PgExample],
    lambda: f64,
    mask_seed: u64,
) -> Result<(f64, PolicyGrads)> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = 1.0 / examples.len() as f64;
    let mut loss = 0.0;
    let mut grads = PolicyGrads::zeros();

    // x ln x extended by its limit 0 at x = 0, so saturated probabilities do
    // not produce NaN.
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };

    for (i, example) in examples.iter().enumerate() {
        let mask = if net.dropout_rate == 0.0 {
            None
        } else {
            Some(net.mask(seeds::derive(mask_seed, i as u64)))
        };
        let trace = net.forward_from_features(&example.features, mask.as_ref());
        let p = [trace.probs.0, trace.probs.1];
        let a = example.action.index();
        let entropy = -(xlnx(p[0]) + xlnx(p[1]));
        loss += scale * (-p[a].max(f64::MIN_POSITIVE).ln() * example.ret - lambda * entropy);

        // d loss / d logits, for the single-step objective.
        let mut dz = Array1::<f64>::zeros(ACTION_DIM);
        for k in 0..ACTION_DIM {
            let indicator = if k == a { 1.0 } else { 0.0 };
            dz[k] = example.ret * (p[k] - indicator) + lambda * (xlnx(p[k]) + p[k] * entropy);
        }
        dz *= scale;

        // Layer 2.
        for j in 0..HIDDEN_DIM {
            for k in 0..ACTION_DIM {
                grads.w2[[j, k]] += trace.hidden[j] * dz[k];
            }
        }
        grads.b2 += &dz;

        // Back through dropout and tanh into layer 1.
        let dhidden = net.w2.dot(&dz);
        let dtanh = match &mask {
            Some(mask) => &dhidden * mask,
            None => dhidden,
        };
        let dpre = &dtanh * &trace.tanh.mapv(|t| 1.0 - t * t);
        for i_in in 0..FEATURE_DIM {
            for j in 0..HIDDEN_DIM {
                grads.w1[[i_in, j]] += trace.input[i_in] * dpre[j];
            }
        }
        grads.b1 += &dpre;
    }

    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn state_with(features: [f64; FEATURE_DIM]) -> PolicyState {
        PolicyState {
            prev: vec![],
            current_query: "q".into(),
            features,
        }
    }

    #[test]
    fn zero_net_is_uniform() {
        let net = PolicyNet::zeros();
        let state = state_with([0.3, 0.0, 0.0, 0.1, 0.0, -1.0, -1.0, 0.9]);
        let (pf, pn) = net.forward(&state, DropoutMode::Off);
        assert_eq!((pf, pn), (0.5, 0.5));
    }

    #[test]
    fn probabilities_sum_to_one_for_random_nets() {
        for seed in 0..20 {
            let net = PolicyNet::init(seed);
            let state = state_with([0.8, 0.2, -0.1, 0.5, 0.0, 1.0, 0.0, 0.4]);
            for mode in [DropoutMode::Off, DropoutMode::Seeded(seed)] {
                let (pf, pn) = net.forward(&state, mode);
                assert!(pf > 0.0 && pn > 0.0);
                assert_abs_diff_eq!(pf + pn, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn miniature_net_matches_scalar_oracle() {
        // Hand-evaluated two-unit path: only hidden units 0 and 1 are wired.
        let mut net = PolicyNet::zeros();
        net.w1[[0, 0]] = 0.5;
        net.w1[[1, 0]] = -0.25;
        net.w1[[0, 1]] = 0.125;
        net.b1[0] = 0.1;
        net.b1[1] = -0.2;
        net.w2[[0, 0]] = 1.0;
        net.w2[[0, 1]] = -0.5;
        net.w2[[1, 0]] = 0.75;
        net.b2[1] = 0.05;

        let mut features = [0.0; FEATURE_DIM];
        features[0] = 0.6;
        features[1] = -0.4;
        let state = state_with(features);

        // Scalar re-derivation.
        let h0 = (0.5f64 * 0.6 + (-0.25) * (-0.4) + 0.1).tanh();
        let h1 = (0.125f64 * 0.6 - 0.2).tanh();
        let z0 = 1.0 * h0 + 0.75 * h1;
        let z1 = -0.5 * h0 + 0.05;
        let e0 = z0.exp();
        let e1 = z1.exp();
        let expected = (e0 / (e0 + e1), e1 / (e0 + e1));

        let got = net.forward(&state, DropoutMode::Off);
        assert_abs_diff_eq!(got.0, expected.0, epsilon = 1e-9);
        assert_abs_diff_eq!(got.1, expected.1, epsilon = 1e-9);
    }

    #[test]
    fn mc_predict_without_dropout_equals_plain_forward() {
        let net = PolicyNet::init(5).with_dropout_rate(0.0).unwrap();
        let state = state_with([0.4, 0.0, 0.0, 0.0, 0.0, -1.0, -1.0, 0.2]);
        let mc = net.mc_predict(&state, 10, 123);
        let plain = net.forward(&state, DropoutMode::Off);
        assert_eq!(mc, plain);
    }

    #[test]
    fn mc_predict_matches_externally_recomputed_mean() {
        let net = PolicyNet::init(9);
        let state = state_with([0.4, 0.3, 0.0, 0.6, 0.0, 1.0, -1.0, 0.8]);
        let seed = 77;
        let got = net.mc_predict(&state, 10, seed);

        let mut sum = (0.0, 0.0);
        for pass in 0..10u64 {
            let p = net.forward(
                &state,
                DropoutMode::Seeded(crate::seeds::derive(seed, pass)),
            );
            sum.0 += p.0;
            sum.1 += p.1;
        }
        assert_eq!(got, (sum.0 / 10.0, sum.1 / 10.0));

        let single = net.mc_predict(&state, 1, seed);
        assert_eq!(
            single,
            net.forward(&state, DropoutMode::Seeded(crate::seeds::derive(seed, 0)))
        );
    }

    #[test]
    fn saturated_policy_always_fetches_with_zero_log_prob() {
        let mut net = PolicyNet::zeros().with_dropout_rate(0.0).unwrap();
        net.b2[0] = 800.0;
        let state = state_with([0.0; FEATURE_DIM]);
        for seed in 0..50 {
            let sampled = net.sample_action(&state, seed);
            assert_eq!(sampled.action, Action::Fetch);
            assert!(sampled.log_prob.abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_policy_samples_near_half_fetch() {
        let net = PolicyNet::zeros().with_dropout_rate(0.0).unwrap();
        let state = state_with([0.0; FEATURE_DIM]);
        let fetches = (0..10_000)
            .filter(|&seed| net.sample_action(&state, seed).action == Action::Fetch)
            .count();
        let rate = fetches as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "fetch rate {rate}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let net = PolicyNet::init(3);
        let state = state_with([0.5, 0.1, 0.0, 0.3, 0.0, 1.0, -1.0, 0.6]);
        let a = net.sample_action(&state, 42);
        let b = net.sample_action(&state, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn pg_loss_single_step_matches_worked_value() {
        // pi(a|s) = 0.5, G = 2, lambda = 0.1:
        // loss = 2 ln 2 - 0.1 ln 2 = 1.9 ln 2.
        let net = PolicyNet::zeros().with_dropout_rate(0.0).unwrap();
        let example = PgExample {
            features: [0.0; FEATURE_DIM],
            action: Action::Fetch,
            ret: 2.0,
        };
        let (loss, _) = pg_loss(&net, &[example], 0.1, 0).unwrap();
        assert_abs_diff_eq!(loss, 1.9 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn pg_loss_null_objective_is_zero_everywhere() {
        let net = PolicyNet::init(2).with_dropout_rate(0.0).unwrap();
        let examples = vec![
            PgExample {
                features: [0.2; FEATURE_DIM],
                action: Action::Fetch,
                ret: 0.0,
            },
            PgExample {
                features: [-0.4; FEATURE_DIM],
                action: Action::NoFetch,
                ret: 0.0,
            },
        ];
        let (loss, grads) = pg_loss(&net, &examples, 0.0, 0).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn pg_loss_rejects_empty_batches() {
        let net = PolicyNet::zeros();
        assert!(matches!(pg_loss(&net, &[], 0.1, 0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn entropy_gradient_step_softens_a_saturated_policy() {
        // With only the -lambda*H term active (G = 0), one descent step must
        // increase entropy on a near-deterministic policy.
        let mut net = PolicyNet::zeros().with_dropout_rate(0.0).unwrap();
        net.b2[0] = 3.0;
        let example = PgExample {
            features: [0.0; FEATURE_DIM],
            action: Action::Fetch,
            ret: 0.0,
        };
        let state = state_with([0.0; FEATURE_DIM]);
        let entropy_of = |net: &PolicyNet| {
            let (pf, pn) = net.forward(&state, DropoutMode::Off);
            -(pf * pf.ln() + pn * pn.ln())
        };
        let before = entropy_of(&net);
        let (_, grads) = pg_loss(&net, &[example], 0.5, 0).unwrap();
        net.apply_update(&grads, 1.0);
        let after = entropy_of(&net);
        assert!(after > before, "entropy {before} -> {after}");
    }

    #[test]
    fn pg_gradients_match_central_finite_differences() {
        let lambda = 0.1;
        let mask_seed = 99;
        let net = PolicyNet::init(11); // dropout 0.1: masks are fixed per position
        let examples: Vec<PgExample> = (0..4)
            .map(|i| PgExample {
                features: std::array::from_fn(|j| ((i * 7 + j) as f64 * 0.37).sin()),
                action: if i % 2 == 0 {
                    Action::Fetch
                } else {
                    Action::NoFetch
                },
                ret: [2.0, -1.0, 0.1, 2.0][i],
            })
            .collect();
        let (_, grads) = pg_loss(&net, &examples, lambda, mask_seed).unwrap();

        let step = 1e-5;
        let mut max_rel = 0.0f64;
        let mut check =
            |get: &dyn Fn(&PolicyNet) -> f64, set: &dyn Fn(&mut PolicyNet, f64), analytic: f64| {
                let base = get(&net);
                let mut plus = net.clone();
                set(&mut plus, base + step);
                let mut minus = net.clone();
                set(&mut minus, base - step);
                let (lp, _) = pg_loss(&plus, &examples, lambda, mask_seed).unwrap();
                let (lm, _) = pg_loss(&minus, &examples, lambda, mask_seed).unwrap();
                let fd = (lp - lm) / (2.0 * step);
                let denom = fd.abs().max(analytic.abs()).max(1e-8);
                max_rel = max_rel.max((fd - analytic).abs() / denom);
            };

        for i in 0..FEATURE_DIM {
            for j in 0..HIDDEN_DIM {
                check(
                    &|n: &PolicyNet| n.w1[[i, j]],
                    &|n: &mut PolicyNet, v| n.w1[[i, j]] = v,
                    grads.w1[[i, j]],
                );
            }
        }
        for j in 0..HIDDEN_DIM {
            check(
                &|n: &PolicyNet| n.b1[j],
                &|n: &mut PolicyNet, v| n.b1[j] = v,
                grads.b1[j],
            );
            for k in 0..ACTION_DIM {
                check(
                    &|n: &PolicyNet| n.w2[[j, k]],
                    &|n: &mut PolicyNet, v| n.w2[[j, k]] = v,
                    grads.w2[[j, k]],
                );
            }
        }
        for k in 0..ACTION_DIM {
            check(
                &|n: &PolicyNet| n.b2[k],
                &|n: &mut PolicyNet, v| n.b2[k] = v,
                grads.b2[k],
            );
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn policy_round_trips_through_file() {
        let net = PolicyNet::init(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        net.save(&path).unwrap();
        let loaded = PolicyNet::load(&path).unwrap();
        assert_eq!(loaded, net);
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["format_version"], 1);
    }
}
