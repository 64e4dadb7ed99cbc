//! The goal-conditioned network and its four ablation variants.
//!
//! All variants share one siamese encoder: the same two dense layers embed
//! both the state observation and the goal observation. On top of that:
//!
//! * `GVF` — per-scene policy heads and a per-scene scalar value head.
//! * `USFA` — adds a shared reward-prediction vector head ω (fed by the goal
//!   embedding) and per-scene successor-feature heads ψ; the value is the
//!   inner product ψᵀω, never a separate readout.
//! * `USFA_SFDP` — additionally feeds ψ into the policy's hidden layer
//!   through a gradient-stopped edge, so the policy can read the successor
//!   features without policy gradients corrupting them.
//! * `VUSFA` — adds a variance output to the encoder; the goal embedding
//!   consumed by ω is a reparameterized sample `z = μ + σ ⊙ ε`. During
//!   training the policy and ψ still read the mean vectors; at inference
//!   every consumer reads `z`.
//!
//! Variants are strictly nested in parameter space: each one only adds named
//! tensors, and initialization is seeded per tensor name, so shared
//! components start bit-identical across variants under the same seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::noise::NoiseSource;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("scene id {0} out of range (model has {1} scenes)")]
    BadSceneId(usize, usize),
    #[error("observation has {got} features, model expects {expected}")]
    ObsDim { got: usize, expected: usize },
    #[error("non-finite activations in forward pass")]
    NonFinite,
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("bad model config text: {0}")]
    BadConfigText(String),
}

/// The four agent variants, in the order they add structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gvf,
    Usfa,
    UsfaSfdp,
    Vusfa,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Gvf,
        Variant::Usfa,
        Variant::UsfaSfdp,
        Variant::Vusfa,
    ];

    /// Successor features and ω exist for everything except the baseline.
    pub fn uses_usf(self) -> bool {
        !matches!(self, Variant::Gvf)
    }

    /// The policy reads ψ through a stopped gradient.
    pub fn uses_sfdp(self) -> bool {
        matches!(self, Variant::UsfaSfdp | Variant::Vusfa)
    }

    /// The encoder outputs a variance and samples by reparameterization.
    pub fn is_variational(self) -> bool {
        matches!(self, Variant::Vusfa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gvf => "GVF",
            Variant::Usfa => "USFA",
            Variant::UsfaSfdp => "USFA_SFDP",
            Variant::Vusfa => "VUSFA",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GVF" => Some(Variant::Gvf),
            "USFA" => Some(Variant::Usfa),
            "USFA_SFDP" | "SFDP" => Some(Variant::UsfaSfdp),
            "VUSFA" => Some(Variant::Vusfa),
            _ => None,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub obs_dim: usize,
    /// Width of φ / z / ω / ψ. They must all match for ψᵀω to make sense.
    pub embed_dim: usize,
    /// Hidden width of the per-scene heads.
    pub hidden_dim: usize,
    /// Hidden width of the encoder's first layer.
    pub enc_hidden: usize,
    pub num_actions: usize,
    pub num_scenes: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, obs_dim: usize, num_scenes: usize) -> Self {
        Self {
            variant,
            obs_dim,
            embed_dim: 64,
            hidden_dim: 128,
            enc_hidden: 256,
            num_actions: 4,
            num_scenes,
        }
    }

    /// Key-value text stored alongside checkpoints.
    pub fn to_kv_text(&self) -> String {
        format!(
            "variant = {}\nobs_dim = {}\nembed_dim = {}\nhidden_dim = {}\nenc_hidden = {}\nnum_actions = {}\nnum_scenes = {}\n",
            self.variant, self.obs_dim, self.embed_dim, self.hidden_dim, self.enc_hidden,
            self.num_actions, self.num_scenes
        )
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ModelError> {
        let mut variant = None;
        let mut fields = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::BadConfigText(format!("no `=` in {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "variant" {
                variant = Some(
                    Variant::parse(v)
                        .ok_or_else(|| ModelError::BadConfigText(format!("variant {v:?}")))?,
                );
            } else {
                let n: usize = v.parse().map_err(|_| {
                    ModelError::BadConfigText(format!("{k} = {v:?} is not an integer"))
                })?;
                fields.insert(k.to_string(), n);
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| ModelError::BadConfigText(format!("missing key {k}")))
        };
        Ok(Self {
            variant: variant.ok_or_else(|| ModelError::BadConfigText("missing variant".into()))?,
            obs_dim: get("obs_dim")?,
            embed_dim: get("embed_dim")?,
            hidden_dim: get("hidden_dim")?,
            enc_hidden: get("enc_hidden")?,
            num_actions: get("num_actions")?,
            num_scenes: get("num_scenes")?,
        })
    }
}

/// Whether the mean vectors or the sampled embeddings feed ψ and the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// An encoded observation on a tape.
pub struct Encoded {
    pub mu: NodeId,
    pub log_var: Option<NodeId>,
    /// Reparameterized sample; equals `mu` for non-variational variants.
    pub z: NodeId,
    /// What ψ and the policy consume: `mu` in train mode, `z` at inference.
    pub repr: NodeId,
}

/// Node handles of one forward evaluation, for building losses.
pub struct ForwardRefs {
    pub log_policy: NodeId,
    pub policy: NodeId,
    pub value: NodeId,
    pub psi: Option<NodeId>,
    pub omega: Option<NodeId>,
    pub mu_state: NodeId,
    pub log_var_state: Option<NodeId>,
    pub mu_goal: NodeId,
    pub log_var_goal: Option<NodeId>,
}

/// One network evaluation: distribution, value, and the vector outputs.
pub struct ForwardOutput {
    pub policy: Vec<f64>,
    pub value: f64,
    pub psi: Option<Tensor>,
    pub omega: Option<Tensor>,
    pub mu_state: Tensor,
    pub mu_goal: Tensor,
    pub refs: ForwardRefs,
}

pub struct Model {
    cfg: ModelConfig,
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed: initialization of a
    // tensor depends only on (seed, name), so variants that share tensors
    // start from identical values.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn weight(&self, seed: u64, name: &str, out: usize, inp: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, name));
        let bound = 1.0 / (inp as f64).sqrt();
        let data: Vec<f64> = (0..out * inp).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(vec![out, inp], data).expect("weight shape")
    }

    /// Initialize all parameters for this variant.
    pub fn build_params(&self, seed: u64) -> ParamSet {
        let c = &self.cfg;
        let mut p = ParamSet::new();
        let dense = |p: &mut ParamSet, name: &str, out: usize, inp: usize| {
            p.insert(&format!("{name}.w"), self.weight(seed, &format!("{name}.w"), out, inp))
                .expect("unique param names");
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![out]))
                .expect("unique param names");
        };

        dense(&mut p, "enc.l1", c.enc_hidden, c.obs_dim);
        dense(&mut p, "enc.mu", c.embed_dim, c.enc_hidden);
        if c.variant.is_variational() {
            dense(&mut p, "enc.logvar", c.embed_dim, c.enc_hidden);
        }
        if c.variant.uses_usf() {
            dense(&mut p, "omega", c.embed_dim, c.embed_dim);
        }
        for s in 0..c.num_scenes {
            dense(&mut p, &format!("scene{s}.policy.h"), c.hidden_dim, 2 * c.embed_dim);
            if c.variant.uses_sfdp() {
                let name = format!("scene{s}.policy.psi.w");
                p.insert(&name, self.weight(seed, &name, c.hidden_dim, c.embed_dim))
                    .expect("unique param names");
            }
            dense(&mut p, &format!("scene{s}.policy.out"), c.num_actions, c.hidden_dim);
            dense(&mut p, &format!("scene{s}.value.h"), c.hidden_dim, 2 * c.embed_dim);
            dense(&mut p, &format!("scene{s}.value.out"), 1, c.hidden_dim);
            if c.variant.uses_usf() {
                dense(&mut p, &format!("scene{s}.psi.h"), c.hidden_dim, 2 * c.embed_dim);
                dense(&mut p, &format!("scene{s}.psi.out"), c.embed_dim, c.hidden_dim);
            }
        }
        p
    }

    fn dense_on(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        name: &str,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let w = tape.param(&format!("{name}.w"), params)?;
        let b = tape.param(&format!("{name}.b"), params)?;
        Ok(tape.dense(w, b, x)?)
    }

    /// Run the shared encoder over one observation.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        obs: &[f64],
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<Encoded, ModelError> {
        if obs.len() != self.cfg.obs_dim {
            return Err(ModelError::ObsDim {
                got: obs.len(),
                expected: self.cfg.obs_dim,
            });
        }
        let x = tape.constant(Tensor::vector(obs.to_vec()));
        let h_pre = self.dense_on(tape, params, "enc.l1", x)?;
        let h = tape.relu(h_pre);
        let mu = self.dense_on(tape, params, "enc.mu", h)?;
        let (log_var, z) = if self.cfg.variant.is_variational() {
            let lv = self.dense_on(tape, params, "enc.logvar", h)?;
            let eps = noise.standard_normal(self.cfg.embed_dim);
            let z = tape.reparameterize(mu, lv, eps)?;
            (Some(lv), z)
        } else {
            (None, mu)
        };
        let repr = match mode {
            Mode::Train => mu,
            Mode::Infer => z,
        };
        Ok(Encoded {
            mu,
            log_var,
            z,
            repr,
        })
    }

    /// ω from the goal embedding. The reparameterized sample feeds this head
    /// (that is the point of the bottleneck); for non-variational variants
    /// `z` is just the mean.
    pub fn omega(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        goal: &Encoded,
    ) -> Result<Option<NodeId>, ModelError> {
        if !self.cfg.variant.uses_usf() {
            return Ok(None);
        }
        Ok(Some(self.dense_on(tape, params, "omega", goal.z)?))
    }

    /// Per-scene heads on top of encoded state and goal.
    ///
    /// `psi_for_policy` overrides the (stopped) ψ the policy conditions on;
    /// tests use it to prove the conditioning is real.
    #[allow(clippy::too_many_arguments)]
    pub fn heads(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        state: &Encoded,
        goal: &Encoded,
        omega: Option<NodeId>,
        scene_id: usize,
        psi_for_policy: Option<NodeId>,
    ) -> Result<ForwardRefs, ModelError> {
        let c = &self.cfg;
        if scene_id >= c.num_scenes {
            return Err(ModelError::BadSceneId(scene_id, c.num_scenes));
        }
        let sg = tape.concat(&[state.repr, goal.repr]);

        let psi = if c.variant.uses_usf() {
            let h_pre = self.dense_on(tape, params, &format!("scene{scene_id}.psi.h"), sg)?;
            let h = tape.relu(h_pre);
            Some(self.dense_on(tape, params, &format!("scene{scene_id}.psi.out"), h)?)
        } else {
            None
        };

        let mut pol_pre = self.dense_on(tape, params, &format!("scene{scene_id}.policy.h"), sg)?;
        if c.variant.uses_sfdp() {
            let psi_in = match psi_for_policy {
                Some(node) => node,
                None => tape.stop_gradient(psi.expect("sfdp implies usf")),
            };
            let w = tape.param(&format!("scene{scene_id}.policy.psi.w"), params)?;
            let zero_b = tape.constant(Tensor::zeros(vec![c.hidden_dim]));
            let psi_term = tape.dense(w, zero_b, psi_in)?;
            pol_pre = tape.add(pol_pre, psi_term)?;
        }
        let pol_h = tape.relu(pol_pre);
        let logits = self.dense_on(tape, params, &format!("scene{scene_id}.policy.out"), pol_h)?;
        let log_policy = tape.log_softmax(logits);
        let policy = tape.exp(log_policy);

        let value = match (psi, omega) {
            (Some(psi), Some(omega)) => tape.dot(psi, omega)?,
            _ => {
                let h_pre =
                    self.dense_on(tape, params, &format!("scene{scene_id}.value.h"), sg)?;
                let h = tape.relu(h_pre);
                self.dense_on(tape, params, &format!("scene{scene_id}.value.out"), h)?
            }
        };

        Ok(ForwardRefs {
            log_policy,
            policy,
            value,
            psi,
            omega,
            mu_state: state.mu,
            log_var_state: state.log_var,
            mu_goal: goal.mu,
            log_var_goal: goal.log_var,
        })
    }

    /// One full evaluation against an already-encoded goal (the trainer
    /// encodes the goal once per segment).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_goal(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        goal: &Encoded,
        omega: Option<NodeId>,
        state_obs: &[f64],
        scene_id: usize,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<ForwardOutput, ModelError> {
        let state = self.encode(tape, params, state_obs, mode, noise)?;
        let refs = self.heads(tape, params, &state, goal, omega, scene_id, None)?;
        self.collect_output(tape, refs)
    }

    /// One full evaluation: encode goal and state, run the heads.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        state_obs: &[f64],
        goal_obs: &[f64],
        scene_id: usize,
        mode: Mode,
        noise: &mut dyn NoiseSource,
    ) -> Result<ForwardOutput, ModelError> {
        let goal = self.encode(tape, params, goal_obs, mode, noise)?;
        let omega = self.omega(tape, params, &goal)?;
        self.forward_with_goal(tape, params, &goal, omega, state_obs, scene_id, mode, noise)
    }

    fn collect_output(
        &self,
        tape: &Tape,
        refs: ForwardRefs,
    ) -> Result<ForwardOutput, ModelError> {
        let policy = tape.value(refs.policy).data().to_vec();
        let value = tape.value(refs.value).item();
        if !policy.iter().all(|p| p.is_finite()) || !value.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(ForwardOutput {
            policy,
            value,
            psi: refs.psi.map(|id| tape.value(id).clone()),
            omega: refs.omega.map(|id| tape.value(id).clone()),
            mu_state: tape.value(refs.mu_state).clone(),
            mu_goal: tape.value(refs.mu_goal).clone(),
            refs,
        })
    }

    /// The deterministic state representation φ: the encoder's mean output.
    /// This is what ψ's TD targets are built from.
    pub fn phi_of(&self, params: &ParamSet, obs: &[f64]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let enc = self.encode(
            &mut tape,
            params,
            obs,
            Mode::Train,
            &mut crate::noise::ZeroNoise,
        )?;
        Ok(tape.value(enc.mu).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{RngNoise, ZeroNoise};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            obs_dim: 12,
            embed_dim: 6,
            hidden_dim: 10,
            enc_hidden: 16,
            num_actions: 4,
            num_scenes: 2,
        }
    }

    fn obs(seed: u64, dim: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let model = Model::new(cfg(Variant::Vusfa));
        let a = model.build_params(11);
        let b = model.build_params(11);
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn gvf_has_no_usf_parameters() {
        let params = Model::new(cfg(Variant::Gvf)).build_params(0);
        assert!(params
            .names()
            .all(|n| !n.contains("psi") && !n.contains("omega") && !n.contains("logvar")));
    }

    #[test]
    fn variants_nest_in_parameter_space() {
        // GVF ⊂ USFA ⊂ USFA_SFDP ⊂ VUSFA, and shared tensors are
        // bit-identical under the same seed.
        let sets: Vec<ParamSet> = Variant::ALL
            .iter()
            .map(|&v| Model::new(cfg(v)).build_params(3))
            .collect();
        for w in sets.windows(2) {
            let (small, big) = (&w[0], &w[1]);
            assert!(small.len() < big.len());
            for (name, tensor) in small.iter() {
                let other = big
                    .get(name)
                    .unwrap_or_else(|| panic!("{name} missing in larger variant"));
                assert_eq!(tensor.shape(), other.shape());
                assert_eq!(tensor.data(), other.data(), "{name} differs across variants");
            }
        }
    }

    #[test]
    fn siamese_encoder_is_shared() {
        let model = Model::new(cfg(Variant::Usfa));
        let params = model.build_params(5);
        let x = obs(1, 12);
        let mut tape = Tape::new();
        let as_state = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut ZeroNoise)
            .unwrap();
        let as_goal = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut ZeroNoise)
            .unwrap();
        assert_eq!(
            tape.value(as_state.mu).data(),
            tape.value(as_goal.mu).data()
        );
    }

    #[test]
    fn non_variational_z_equals_mu() {
        for variant in [Variant::Gvf, Variant::Usfa, Variant::UsfaSfdp] {
            let model = Model::new(cfg(variant));
            let params = model.build_params(5);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut noise = RngNoise::new(&mut rng);
            let mut tape = Tape::new();
            let enc = model
                .encode(&mut tape, &params, &obs(2, 12), Mode::Train, &mut noise)
                .unwrap();
            assert_eq!(enc.z, enc.mu);
            assert!(enc.log_var.is_none());
        }
    }

    #[test]
    fn vusfa_noise_isolated_in_eps() {
        let model = Model::new(cfg(Variant::Vusfa));
        let params = model.build_params(5);
        let x = obs(3, 12);
        let mut tape = Tape::new();

        let mut zero = ZeroNoise;
        let e0 = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut zero)
            .unwrap();
        assert_eq!(tape.value(e0.z).data(), tape.value(e0.mu).data());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut noise = RngNoise::new(&mut rng);
        let e1 = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut noise)
            .unwrap();
        let e2 = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut noise)
            .unwrap();
        // Same mean, different samples.
        assert_eq!(tape.value(e1.mu).data(), tape.value(e2.mu).data());
        assert_ne!(tape.value(e1.z).data(), tape.value(e2.z).data());
    }

    #[test]
    fn value_decouples_exactly_for_usf_variants() {
        for variant in [Variant::Usfa, Variant::UsfaSfdp, Variant::Vusfa] {
            let model = Model::new(cfg(variant));
            let params = model.build_params(7);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for trial in 0..50 {
                let mut noise = RngNoise::new(&mut rng);
                let mut tape = Tape::new();
                let out = model
                    .forward(
                        &mut tape,
                        &params,
                        &obs(trial, 12),
                        &obs(trial + 1000, 12),
                        (trial % 2) as usize,
                        Mode::Train,
                        &mut noise,
                    )
                    .unwrap();
                let psi = out.psi.as_ref().unwrap();
                let omega = out.omega.as_ref().unwrap();
                let dot: f64 = psi.iter().zip(omega.iter()).map(|(a, b)| a * b).sum();
                assert_eq!(out.value, dot, "{variant}: value must equal psi.omega");
            }
        }
    }

    #[test]
    fn gvf_has_direct_value_and_no_usf_outputs() {
        let model = Model::new(cfg(Variant::Gvf));
        let params = model.build_params(7);
        let mut tape = Tape::new();
        let out = model
            .forward(
                &mut tape,
                &params,
                &obs(1, 12),
                &obs(2, 12),
                0,
                Mode::Train,
                &mut ZeroNoise,
            )
            .unwrap();
        assert!(out.psi.is_none());
        assert!(out.omega.is_none());
        assert!(out.value.is_finite());
    }

    #[test]
    fn policy_is_a_distribution() {
        for variant in Variant::ALL {
            let model = Model::new(cfg(variant));
            let params = model.build_params(13);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut noise = RngNoise::new(&mut rng);
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    &params,
                    &obs(5, 12),
                    &obs(6, 12),
                    1,
                    Mode::Train,
                    &mut noise,
                )
                .unwrap();
            let sum: f64 = out.policy.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(out.policy.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn sfdp_policy_params_do_not_affect_psi_or_omega() {
        let model = Model::new(cfg(Variant::UsfaSfdp));
        let mut params = model.build_params(9);
        let run = |params: &ParamSet| {
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    params,
                    &obs(1, 12),
                    &obs(2, 12),
                    0,
                    Mode::Train,
                    &mut ZeroNoise,
                )
                .unwrap();
            (out.psi.unwrap(), out.omega.unwrap(), out.policy)
        };
        let (psi0, omega0, policy0) = run(&params);
        params.get_mut("scene0.policy.h.w").unwrap().data_mut()[3] += 0.5;
        params.get_mut("scene0.policy.psi.w").unwrap().data_mut()[0] += 0.5;
        let (psi1, omega1, policy1) = run(&params);
        assert_eq!(psi0.data(), psi1.data());
        assert_eq!(omega0.data(), omega1.data());
        assert_ne!(policy0, policy1);
    }

    #[test]
    fn pure_policy_loss_has_zero_gradient_on_psi_head() {
        for variant in [Variant::UsfaSfdp, Variant::Vusfa] {
            let model = Model::new(cfg(variant));
            let params = model.build_params(21);
            let mut tape = Tape::new();
            let out = model
                .forward(
                    &mut tape,
                    &params,
                    &obs(8, 12),
                    &obs(9, 12),
                    0,
                    Mode::Train,
                    &mut ZeroNoise,
                )
                .unwrap();
            // A pure policy loss: -log pi(a=2).
            let lp = tape.index(out.refs.log_policy, 2);
            let loss = tape.affine(lp, -1.0, 0.0);
            tape.backward(loss).unwrap();
            let grads = tape.param_grads(&params);
            for (i, (name, _)) in params.iter().enumerate() {
                if name.contains(".psi.h") || name.contains(".psi.out") || name.contains("omega")
                {
                    assert!(
                        grads.get(i).iter().all(|&g| g == 0.0),
                        "{variant}: policy loss leaked into {name}"
                    );
                }
            }
        }
    }

    #[test]
    fn policy_conditioning_on_psi_is_real() {
        let model = Model::new(cfg(Variant::UsfaSfdp));
        let params = model.build_params(17);
        let so = obs(1, 12);
        let go = obs(2, 12);

        let mut tape = Tape::new();
        let goal = model
            .encode(&mut tape, &params, &go, Mode::Train, &mut ZeroNoise)
            .unwrap();
        let omega = model.omega(&mut tape, &params, &goal).unwrap();
        let state = model
            .encode(&mut tape, &params, &so, Mode::Train, &mut ZeroNoise)
            .unwrap();
        let normal = model
            .heads(&mut tape, &params, &state, &goal, omega, 0, None)
            .unwrap();
        let psi_value = tape.value(normal.psi.unwrap()).clone();

        let mut perturbed = psi_value.clone();
        for v in perturbed.data_mut() {
            *v += 0.75;
        }
        let injected = tape.constant(perturbed);
        let alt = model
            .heads(&mut tape, &params, &state, &goal, omega, 0, Some(injected))
            .unwrap();
        assert_ne!(
            tape.value(normal.policy).data(),
            tape.value(alt.policy).data(),
            "policy must actually read psi"
        );
    }

    #[test]
    fn phi_matches_encoder_mean_and_separates_inputs() {
        let model = Model::new(cfg(Variant::Vusfa));
        let params = model.build_params(23);
        let x = obs(4, 12);
        let phi = model.phi_of(&params, &x).unwrap();
        assert_eq!(phi.len(), 6);

        let mut tape = Tape::new();
        let enc = model
            .encode(&mut tape, &params, &x, Mode::Train, &mut ZeroNoise)
            .unwrap();
        assert_eq!(phi.data(), tape.value(enc.mu).data());

        let other = model.phi_of(&params, &obs(44, 12)).unwrap();
        assert_ne!(phi.data(), other.data());
    }

    #[test]
    fn invalid_scene_and_obs_dims_error() {
        let model = Model::new(cfg(Variant::Usfa));
        let params = model.build_params(1);
        let mut tape = Tape::new();
        assert!(matches!(
            model.forward(
                &mut tape,
                &params,
                &obs(0, 12),
                &obs(1, 12),
                9,
                Mode::Train,
                &mut ZeroNoise
            ),
            Err(ModelError::BadSceneId(9, 2))
        ));
        assert!(matches!(
            model.forward(
                &mut tape,
                &params,
                &obs(0, 5),
                &obs(1, 12),
                0,
                Mode::Train,
                &mut ZeroNoise
            ),
            Err(ModelError::ObsDim { got: 5, .. })
        ));
    }

    #[test]
    fn model_config_text_round_trips() {
        let c = cfg(Variant::Vusfa);
        let text = c.to_kv_text();
        let back = ModelConfig::from_kv_text(&text).unwrap();
        assert_eq!(c, back);
        assert!(ModelConfig::from_kv_text("variant = NOPE\n").is_err());
    }
}
